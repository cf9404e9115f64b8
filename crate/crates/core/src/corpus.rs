//! Seeded order-k Markov token streams with skewed transition rows, plus a
//! raw little-endian `u32` token file format.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SHARPNESS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub vocab: usize,
    pub n_tokens: usize,
    pub order: usize,
    /// Exponent `s` of the rank distribution `p(r) ∝ (r + 1)^-s`.
    /// Larger values make rows closer to deterministic.
    pub sharpness: f64,
}

impl CorpusConfig {
    pub fn new(seed: u64, vocab: usize, n_tokens: usize, order: usize) -> Self {
        CorpusConfig {
            seed,
            vocab,
            n_tokens,
            order,
            sharpness: DEFAULT_SHARPNESS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Input(format!(
                "vocab must be ≥ 2, got {}",
                self.vocab
            )));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::Input("vocab does not fit in u32 tokens".into()));
        }
        if self.order < 1 {
            return Err(Error::Input("order must be ≥ 1".into()));
        }
        if !(self.sharpness.is_finite() && self.sharpness >= 0.0) {
            return Err(Error::Input("sharpness must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Transition rows are built lazily per context. Each row ranks the
/// vocabulary by weighted sampling without replacement (low token ids are
/// favoured, which skews the unigram distribution) and assigns rank `r`
/// the probability `(r + 1)^-s / Σ`.
struct Chain {
    cfg: CorpusConfig,
    rank_cdf: Vec<f64>,
    rows: HashMap<Vec<u32>, Vec<u32>>,
}

impl Chain {
    fn new(cfg: CorpusConfig) -> Self {
        let weights: Vec<f64> = (0..cfg.vocab)
            .map(|r| (r as f64 + 1.0).powf(-cfg.sharpness))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let rank_cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Chain {
            cfg,
            rank_cdf,
            rows: HashMap::new(),
        }
    }

    fn context_stream(&self, ctx: &[u32]) -> u64 {
        ctx.iter().fold(1u64, |h, &t| {
            h.wrapping_mul(self.cfg.vocab as u64 + 1)
                .wrapping_add(t as u64 + 1)
        })
    }

    fn row(&mut self, ctx: &[u32]) -> &[u32] {
        if !self.rows.contains_key(ctx) {
            let mut r = rng::seeded(self.cfg.seed, self.context_stream(ctx));
            // Efraimidis–Spirakis keys u^(1/w) with w = 1/(j+1).
            let mut keyed: Vec<(f64, u32)> = (0..self.cfg.vocab)
                .map(|j| {
                    let u: f64 = r.random::<f64>().max(f64::MIN_POSITIVE);
                    (u.powf(j as f64 + 1.0), j as u32)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            self.rows
                .insert(ctx.to_vec(), keyed.into_iter().map(|(_, t)| t).collect());
        }
        &self.rows[ctx]
    }

    fn sample_rank(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.rank_cdf
            .partition_point(|&c| c <= u)
            .min(self.cfg.vocab - 1)
    }
}

/// Generates `cfg.n_tokens` tokens. Identical configs give identical streams.
pub fn generate(cfg: &CorpusConfig) -> Result<Vec<u32>> {
    cfg.validate()?;
    let mut chain = Chain::new(cfg.clone());
    let mut r = rng::seeded(cfg.seed, u64::MAX);
    let mut out = Vec::with_capacity(cfg.n_tokens);
    for _ in 0..cfg.order.min(cfg.n_tokens) {
        out.push(r.random_range(0..cfg.vocab as u32));
    }
    while out.len() < cfg.n_tokens {
        let rank = chain.sample_rank(&mut r);
        let ctx = &out[out.len() - cfg.order..];
        let next = chain.row(ctx)[rank];
        out.push(next);
    }
    Ok(out)
}

pub fn make_synthetic_corpus(
    seed: u64,
    vocab: usize,
    n_tokens: usize,
    order: usize,
) -> Result<Vec<u32>> {
    generate(&CorpusConfig::new(seed, vocab, n_tokens, order))
}

/// Empirical unigram entropy in nats.
pub fn unigram_entropy(tokens: &[u32]) -> f64 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_corpus(7, 32, 5000, 1).unwrap();
        let b = make_synthetic_corpus(7, 32, 5000, 1).unwrap();
        let c = make_synthetic_corpus(8, 32, 5000, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&t| t < 32));
    }

    #[test]
    fn unigram_entropy_well_below_uniform() {
        for order in [1, 2] {
            let toks = make_synthetic_corpus(3, 64, 50_000, order).unwrap();
            let h = unigram_entropy(&toks);
            assert!(h < 0.9 * 64f64.ln(), "order {order}: {h}");
        }
    }

    #[test]
    fn sharp_rows_are_nearly_deterministic() {
        let cfg = CorpusConfig {
            sharpness: 6.0,
            ..CorpusConfig::new(1, 16, 20_000, 1)
        };
        let toks = generate(&cfg).unwrap();
        let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
        for w in toks.windows(2) {
            *pairs.entry((w[0], w[1])).or_default() += 1;
        }
        let mut best: HashMap<u32, usize> = HashMap::new();
        for (&(a, _), &c) in &pairs {
            let e = best.entry(a).or_default();
            *e = (*e).max(c);
        }
        let hits: usize = best.values().sum();
        assert!(hits as f64 > 0.95 * (toks.len() - 1) as f64);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_synthetic_corpus(0, 1, 10, 1).is_err());
        assert!(make_synthetic_corpus(0, 8, 10, 0).is_err());
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toks.bin");
        let toks = make_synthetic_corpus(2, 100, 1000, 2).unwrap();
        write_tokens(&p, &toks).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 4000);
        assert_eq!(read_tokens(&p).unwrap(), toks);
        fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_tokens(&p), Err(Error::Corrupt(_))));
    }
}
