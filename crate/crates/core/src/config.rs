use serde::{Deserialize, Serialize};

/// Architecture hyperparameters of a dense decoder-only transformer.
///
/// Field names double as the on-disk JSON keys of `config.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub kv_groups: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub qkv_bias: bool,
    pub context_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroDimension(&'static str),
    #[error("hidden_dim ≠ heads×head_dim ({hidden_dim} ≠ {n_heads}×{head_dim})")]
    HiddenMismatch {
        hidden_dim: usize,
        n_heads: usize,
        head_dim: usize,
    },
    #[error("heads not divisible by kv_groups ({n_heads} % {kv_groups} ≠ 0)")]
    KvGroups { n_heads: usize, kv_groups: usize },
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("kv_groups", self.kv_groups),
            ("intermediate_dim", self.intermediate_dim),
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::ZeroDimension(name));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(ConfigError::HiddenMismatch {
                hidden_dim: self.hidden_dim,
                n_heads: self.n_heads,
                head_dim: self.head_dim,
            });
        }
        if !self.n_heads.is_multiple_of(self.kv_groups) {
            return Err(ConfigError::KvGroups {
                n_heads: self.n_heads,
                kv_groups: self.kv_groups,
            });
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.kv_groups
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_groups * self.head_dim
    }

    /// The 16B dense model of the production run (vocabulary size assumed).
    pub fn dense_16b(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 40,
            hidden_dim: 5120,
            n_heads: 40,
            head_dim: 128,
            kv_groups: 8,
            intermediate_dim: 20480,
            vocab_size,
            qkv_bias: true,
            context_length: 4096,
        }
    }
}

pub fn validate_config(config: &ModelConfig) -> Result<(), ConfigError> {
    config.validate()
}
