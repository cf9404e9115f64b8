//! Sparse upcycling of a dense checkpoint, top-k routing and the two
//! router auxiliary losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{names, Checkpoint, MLP_LEAVES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub aux_coeff: f64,
    pub z_coeff: f64,
    pub router_init_std: f64,
    #[serde(default = "default_true")]
    pub renormalize_gates: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MoEConfig {
    /// 8 experts, top-2, load-balance weight 0.001, z-loss weight 0.01,
    /// router std 0.02.
    fn default() -> Self {
        MoEConfig {
            n_experts: 8,
            top_k: 2,
            aux_coeff: 0.001,
            z_coeff: 0.01,
            router_init_std: 0.02,
            renormalize_gates: true,
        }
    }
}

impl MoEConfig {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        MoEConfig {
            n_experts,
            top_k,
            ..Default::default()
        }
    }

    /// Router initialised with the given variance rather than std.
    pub fn with_router_variance(mut self, variance: f64) -> Self {
        self.router_init_std = variance.sqrt();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Moe(format!(
                "top_k must be in 1..={} (got {})",
                self.n_experts, self.top_k
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.aux_coeff) || !finite_nonneg(self.z_coeff) {
            return Err(Error::Moe(
                "loss coefficients must be finite and ≥ 0".into(),
            ));
        }
        if !finite_nonneg(self.router_init_std) {
            return Err(Error::Moe("router_init_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// One token's routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Selected experts, highest probability first.
    pub experts: Vec<usize>,
    pub gates: Vec<f64>,
    /// Full softmax over all experts.
    pub probs: Vec<f64>,
    /// Log-sum-exp of the router logits.
    pub z: f64,
}

/// Routes from precomputed router logits. Ties go to the lower expert index.
pub fn route_logits(logits: &[f64], top_k: usize, renormalize: bool) -> Result<Routing> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Moe("non-finite router logits".into()));
    }
    if top_k == 0 || top_k > logits.len() {
        return Err(Error::Moe(format!(
            "top_k {top_k} out of range for {} experts",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let z = max + sum.ln();

    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let experts: Vec<usize> = order[..top_k].to_vec();
    let mut gates: Vec<f64> = experts.iter().map(|&e| probs[e]).collect();
    if renormalize {
        let s: f64 = gates.iter().sum();
        gates.iter_mut().for_each(|g| *g /= s);
    }
    Ok(Routing {
        experts,
        gates,
        probs,
        z,
    })
}

/// Router logits `x · router` for a single hidden vector, then [`route_logits`].
pub fn route(x: &[f64], router: &Tensor<f64>, cfg: &MoEConfig) -> Result<Routing> {
    let (d, e) = router.matrix_dims();
    if x.len() != d || e != cfg.n_experts {
        return Err(Error::Moe(format!(
            "router shape {:?} does not match input {} / {} experts",
            router.shape(),
            x.len(),
            cfg.n_experts
        )));
    }
    let w = router.data();
    let logits: Vec<f64> = (0..e)
        .map(|j| (0..d).map(|i| x[i] * w[i * e + j]).sum())
        .collect();
    route_logits(&logits, cfg.top_k, cfg.renormalize_gates)
}

/// Batch statistics behind the auxiliary losses.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    /// Share of the `k × tokens` assignments that went to each expert.
    pub f: Vec<f64>,
    /// Mean router probability per expert.
    pub p: Vec<f64>,
    /// Per-token log-sum-exp of router logits.
    pub z: Vec<f64>,
}

impl RoutingStats {
    pub fn from_routings<'a>(
        routings: impl IntoIterator<Item = &'a Routing>,
        n_experts: usize,
    ) -> Self {
        let mut counts = vec![0usize; n_experts];
        let mut p = vec![0.0; n_experts];
        let mut z = Vec::new();
        let mut assignments = 0usize;
        for r in routings {
            for &e in &r.experts {
                counts[e] += 1;
            }
            assignments += r.experts.len();
            for (acc, q) in p.iter_mut().zip(&r.probs) {
                *acc += q;
            }
            z.push(r.z);
        }
        let tokens = z.len().max(1) as f64;
        RoutingStats {
            f: counts
                .iter()
                .map(|&c| c as f64 / assignments.max(1) as f64)
                .collect(),
            p: p.iter().map(|v| v / tokens).collect(),
            z,
        }
    }
}

/// `N · Σ fᵢ Pᵢ`; equals 1 for perfectly uniform routing.
pub fn load_balance_loss(stats: &RoutingStats, n_experts: usize) -> f64 {
    n_experts as f64
        * stats
            .f
            .iter()
            .zip(&stats.p)
            .map(|(f, p)| f * p)
            .sum::<f64>()
}

/// Mean over tokens of the squared router log-sum-exp.
pub fn max_z_loss(z: &[f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64
}

pub fn moe_total_loss(ce: f64, aux: f64, z: f64, cfg: &MoEConfig) -> f64 {
    ce + cfg.aux_coeff * aux + cfg.z_coeff * z
}

/// Zero-mean normal router matrix `[hidden, n_experts]`.
pub fn init_router<T: Scalar>(
    hidden: usize,
    n_experts: usize,
    std: f64,
    seed: u64,
    layer: usize,
) -> Tensor<T> {
    let mut rng = rng::seeded(seed, 0x5EED_0000 + layer as u64);
    rng::normal_tensor(&[hidden, n_experts], std, &mut rng)
}

/// Replaces every dense MLP by `n_experts` bitwise copies plus a fresh router.
pub fn upcycle<T: Scalar>(
    dense: &Checkpoint<T>,
    cfg: &MoEConfig,
    seed: u64,
) -> Result<Checkpoint<T>> {
    if dense.is_moe() {
        return Err(Error::Moe(
            "checkpoint is already a mixture of experts".into(),
        ));
    }
    cfg.validate()?;
    let config = dense.config.clone();
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (name, t) in dense.tensors() {
        let is_mlp =
            matches!(names::split_layer(name), Some((_, leaf)) if leaf.starts_with("mlp."));
        if !is_mlp {
            tensors.insert(name.clone(), t.clone());
        }
    }
    for l in 0..config.n_layers {
        for leaf in MLP_LEAVES {
            let src = dense.tensor(&names::mlp(l, leaf))?;
            for e in 0..cfg.n_experts {
                tensors.insert(names::expert(l, e, leaf), src.clone());
            }
        }
        tensors.insert(
            names::router(l),
            init_router(
                config.hidden_dim,
                cfg.n_experts,
                cfg.router_init_std,
                seed,
                l,
            ),
        );
    }
    Checkpoint::new(config, Some(cfg.clone()), tensors)
}
