//! Named tensor store plus its on-disk format.
//!
//! A checkpoint directory holds `config.json` (a [`ModelConfig`]), an
//! optional `moe.json` (a [`MoEConfig`]) and `model.tensors`:
//!
//! ```text
//! u64 little-endian header length N
//! N bytes of UTF-8 JSON: { name: { "dtype": "f32", "shape": [..], "data_offsets": [start, end] } }
//! raw little-endian f32 data, offsets relative to the end of the header
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::moe::MoEConfig;
use crate::tensor::{Scalar, Tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const MOE_FILE: &str = "moe.json";
pub const TENSOR_FILE: &str = "model.tensors";

/// Canonical tensor names.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const FINAL_NORM: &str = "final_norm";
    pub const UNEMBED: &str = "unembed";

    pub fn layer(l: usize, leaf: &str) -> String {
        format!("layers.{l}.{leaf}")
    }
    pub fn attn_norm(l: usize) -> String {
        layer(l, "attn_norm")
    }
    pub fn wq(l: usize) -> String {
        layer(l, "attn.wq")
    }
    pub fn wk(l: usize) -> String {
        layer(l, "attn.wk")
    }
    pub fn wv(l: usize) -> String {
        layer(l, "attn.wv")
    }
    pub fn q_bias(l: usize) -> String {
        layer(l, "attn.q_bias")
    }
    pub fn k_bias(l: usize) -> String {
        layer(l, "attn.k_bias")
    }
    pub fn v_bias(l: usize) -> String {
        layer(l, "attn.v_bias")
    }
    pub fn wo(l: usize) -> String {
        layer(l, "attn.wo")
    }
    pub fn mlp_norm(l: usize) -> String {
        layer(l, "mlp_norm")
    }
    /// Dense MLP weight, `leaf` one of `w_gate`, `w_up`, `w_down`.
    pub fn mlp(l: usize, leaf: &str) -> String {
        layer(l, &format!("mlp.{leaf}"))
    }
    pub fn router(l: usize) -> String {
        layer(l, "moe.router")
    }
    pub fn expert(l: usize, e: usize, leaf: &str) -> String {
        layer(l, &format!("moe.expert.{e}.{leaf}"))
    }

    /// Splits `layers.{l}.rest` into `(l, rest)`.
    pub fn split_layer(name: &str) -> Option<(usize, &str)> {
        let rest = name.strip_prefix("layers.")?;
        let (idx, leaf) = rest.split_once('.')?;
        Some((idx.parse().ok()?, leaf))
    }
}

pub const MLP_LEAVES: [&str; 3] = ["w_gate", "w_up", "w_down"];

/// Every tensor name the configuration requires, with its shape.
pub fn expected_shapes(
    config: &ModelConfig,
    moe: Option<&MoEConfig>,
) -> BTreeMap<String, Vec<usize>> {
    let d = config.hidden_dim;
    let i = config.intermediate_dim;
    let mut shapes = BTreeMap::new();
    shapes.insert(names::EMBED.to_string(), vec![config.vocab_size, d]);
    shapes.insert(names::FINAL_NORM.to_string(), vec![d]);
    shapes.insert(names::UNEMBED.to_string(), vec![d, config.vocab_size]);
    for l in 0..config.n_layers {
        shapes.insert(names::attn_norm(l), vec![d]);
        shapes.insert(names::wq(l), vec![d, config.q_dim()]);
        shapes.insert(names::wk(l), vec![d, config.kv_dim()]);
        shapes.insert(names::wv(l), vec![d, config.kv_dim()]);
        if config.qkv_bias {
            shapes.insert(names::q_bias(l), vec![config.q_dim()]);
            shapes.insert(names::k_bias(l), vec![config.kv_dim()]);
            shapes.insert(names::v_bias(l), vec![config.kv_dim()]);
        }
        shapes.insert(names::wo(l), vec![config.q_dim(), d]);
        shapes.insert(names::mlp_norm(l), vec![d]);
        let mlp_shapes = [vec![d, i], vec![d, i], vec![i, d]];
        match moe {
            None => {
                for (leaf, shape) in MLP_LEAVES.iter().zip(mlp_shapes) {
                    shapes.insert(names::mlp(l, leaf), shape);
                }
            }
            Some(m) => {
                shapes.insert(names::router(l), vec![d, m.n_experts]);
                for e in 0..m.n_experts {
                    for (leaf, shape) in MLP_LEAVES.iter().zip(mlp_shapes.iter()) {
                        shapes.insert(names::expert(l, e, leaf), shape.clone());
                    }
                }
            }
        }
    }
    shapes
}

/// A validated set of named tensors for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub config: ModelConfig,
    pub moe: Option<MoEConfig>,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Builds a checkpoint, checking completeness, shapes and finiteness.
    pub fn new(
        config: ModelConfig,
        moe: Option<MoEConfig>,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &moe {
            m.validate()?;
        }
        let expected = expected_shapes(&config, moe.as_ref());
        check_names(&expected, tensors.keys())?;
        for (name, t) in &tensors {
            let shape = &expected[name];
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(Checkpoint {
            config,
            moe,
            tensors,
        })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn is_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            moe: self.moe.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Bitwise equality of configuration and every tensor.
    pub fn bitwise_eq(&self, other: &Checkpoint<T>) -> bool {
        self.config == other.config
            && self.moe == other.moe
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

fn check_names<'a>(
    expected: &BTreeMap<String, Vec<usize>>,
    found: impl Iterator<Item = &'a String> + Clone,
) -> Result<()> {
    for name in found.clone() {
        if !expected.contains_key(name) {
            return Err(Error::UnknownTensor(name.clone()));
        }
    }
    let found: std::collections::BTreeSet<&String> = found.collect();
    if let Some(missing) = expected.keys().find(|k| !found.contains(k)) {
        return Err(Error::MissingTensor(missing.clone()));
    }
    Ok(())
}

/// Total and per-token parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub activated: u64,
}

impl ParamCount {
    /// Closed-form count from the shapes a configuration implies.
    pub fn for_config(config: &ModelConfig, moe: Option<&MoEConfig>) -> Self {
        let shapes = expected_shapes(config, moe);
        let total: u64 = shapes
            .values()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum();
        let activated = match moe {
            None => total,
            Some(m) => {
                let per_expert = 3 * (config.hidden_dim * config.intermediate_dim) as u64;
                let idle = (m.n_experts - m.top_k) as u64;
                total - idle * per_expert * config.n_layers as u64
            }
        };
        ParamCount { total, activated }
    }
}

pub fn count_params<T: Scalar>(ckpt: &Checkpoint<T>) -> ParamCount {
    let total: u64 = ckpt.tensors.values().map(|t| t.len() as u64).sum();
    let activated = match &ckpt.moe {
        None => total,
        Some(m) => {
            let idle_experts = m.n_experts - m.top_k;
            let per_layer_expert: u64 = MLP_LEAVES
                .iter()
                .map(|leaf| ckpt.tensors[&names::expert(0, 0, leaf)].len() as u64)
                .sum();
            total - idle_experts as u64 * per_layer_expert * ckpt.config.n_layers as u64
        }
    };
    ParamCount { total, activated }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn save_checkpoint(ckpt: &Checkpoint<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_json(&dir.join(CONFIG_FILE), &ckpt.config)?;
    let moe_path = dir.join(MOE_FILE);
    match &ckpt.moe {
        Some(m) => write_json(&moe_path, m)?,
        None if moe_path.exists() => {
            fs::remove_file(&moe_path).map_err(|e| Error::io(&moe_path, e))?
        }
        None => {}
    }

    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let bytes = 4 * t.len() as u64;
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            },
        );
        offset += bytes;
    }
    let header = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(8 + header.len() + offset as usize);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in ckpt.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(TENSOR_FILE);
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint<f32>> {
    let dir = dir.as_ref();
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let moe_path = dir.join(MOE_FILE);
    let moe: Option<MoEConfig> = if moe_path.exists() {
        Some(read_json(&moe_path)?)
    } else {
        None
    };

    let path = dir.join(TENSOR_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let tensors = decode_tensors(&bytes)?;
    Checkpoint::new(config, moe, tensors)
}

fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    if bytes.len() < 8 {
        return Err(Error::Corrupt("truncated: no header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Corrupt("truncated: header extends past end of file".into()))?
        as usize;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&bytes[8..data_start])?;
    let data = &bytes[data_start..];

    let mut tensors = BTreeMap::new();
    for (name, entry) in header {
        if entry.dtype != "f32" {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` has unsupported dtype {}",
                entry.dtype
            )));
        }
        let [start, end] = entry.data_offsets;
        let n: usize = entry.shape.iter().product();
        if end < start || end - start != 4 * n as u64 {
            return Err(Error::Corrupt(format!(
                "tensor `{name}`: offsets {start}..{end} do not match shape {:?}",
                entry.shape
            )));
        }
        if end > data.len() as u64 {
            return Err(Error::Corrupt(format!(
                "truncated: tensor `{name}` ends at byte {end} of {}",
                data.len()
            )));
        }
        let values = data[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape, values)?);
    }
    Ok(tensors)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_init;

    fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            head_dim: 4,
            kv_groups: 2,
            intermediate_dim: 16,
            vocab_size: 32,
            qkv_bias: false,
            context_length: 16,
        }
    }

    #[test]
    fn toy_param_count_matches_hand_sum() {
        // embed 32*8 + unembed 8*32 + final norm 8
        // per layer: 2 norms 2*8, wq/wk/wv/wo 4*64, mlp 3*128
        let per_layer = 16 + 256 + 384;
        let expected = 256 + 256 + 8 + 2 * per_layer;
        assert_eq!(expected, 1832);
        let ckpt = random_init(&toy(), 1).unwrap();
        let count = count_params(&ckpt);
        assert_eq!(count.total, 1832);
        assert_eq!(count.activated, count.total);
        assert_eq!(ParamCount::for_config(&toy(), None), count);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = random_init(
            &ModelConfig {
                qkv_bias: true,
                ..toy()
            },
            7,
        )
        .unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert!(back.bitwise_eq(&ckpt));
    }

    #[test]
    fn missing_tensor_is_named() {
        let ckpt = random_init(&toy(), 1).unwrap();
        let mut tensors = ckpt.clone().into_tensors();
        tensors.remove("layers.1.mlp.w_up");
        let err = Checkpoint::new(toy(), None, tensors).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "layers.1.mlp.w_up"));
    }

    #[test]
    fn shape_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            hidden_dim: 16,
            n_heads: 4,
            ..toy()
        };
        let ckpt = random_init(&cfg, 3).unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();

        // Rewrite with wq stored as (8, 8) while the config expects (16, 16).
        let mut tensors = ckpt.into_tensors();
        tensors.insert("layers.0.attn.wq".into(), Tensor::zeros(&[8, 8]));
        let bytes = encode_for_test(&tensors);
        fs::write(dir.path().join(TENSOR_FILE), bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        match err {
            Error::Shape {
                name,
                expected,
                found,
            } => {
                assert_eq!(name, "layers.0.attn.wq");
                assert_eq!(expected, vec![16, 16]);
                assert_eq!(found, vec![8, 8]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_and_non_finite_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = random_init(&toy(), 3).unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();

        let mut tensors = ckpt.clone().into_tensors();
        tensors.insert("layers.0.attn.extra".into(), Tensor::zeros(&[2]));
        fs::write(dir.path().join(TENSOR_FILE), encode_for_test(&tensors)).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::UnknownTensor(n)) if n == "layers.0.attn.extra"
        ));

        let mut tensors = ckpt.into_tensors();
        tensors.get_mut(names::EMBED).unwrap().data_mut()[3] = f32::NAN;
        fs::write(dir.path().join(TENSOR_FILE), encode_for_test(&tensors)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::NonFinite(n)) if n == "embed"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = random_init(&toy(), 3).unwrap();
        save_checkpoint(&ckpt, dir.path()).unwrap();
        let path = dir.path().join(TENSOR_FILE);
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(
                load_checkpoint(dir.path()),
                Err(Error::Corrupt(_) | Error::Json(_))
            ));
        }
    }

    fn encode_for_test(tensors: &BTreeMap<String, Tensor<f32>>) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut off = 0u64;
        for (k, t) in tensors {
            let n = 4 * t.len() as u64;
            header.insert(
                k.clone(),
                HeaderEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    data_offsets: [off, off + n],
                },
            );
            off += n;
        }
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = (h.len() as u64).to_le_bytes().to_vec();
        out.extend(h);
        for t in tensors.values() {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }
}
