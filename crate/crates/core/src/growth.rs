//! Width and depth growth of a dense checkpoint.
//!
//! Width growth copies neurons along a [`WidthMap`]: an expanded output axis
//! duplicates slices, an expanded input axis duplicates rows and divides them
//! by the source's multiplicity, so a layer fed duplicated activations
//! reproduces its original outputs. AKI fills the fresh output slices of
//! layer `l` from layer `l + 1` instead of from itself.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{names, Checkpoint};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Attention, Block, Ffn, Mlp, Net};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Mapping from each new position to the source position it copies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WidthMap {
    src_index: Vec<usize>,
    multiplicity: Vec<usize>,
}

impl WidthMap {
    /// Circular copy: position `i` copies `i mod old_dim`.
    pub fn circular(old_dim: usize, new_dim: usize) -> Result<Self> {
        if old_dim == 0 || new_dim < old_dim {
            return Err(Error::Growth(format!(
                "cannot map {old_dim} positions onto {new_dim}"
            )));
        }
        Self::from_sources(old_dim, (0..new_dim).map(|i| i % old_dim).collect())
    }

    pub fn identity(dim: usize) -> Self {
        WidthMap {
            src_index: (0..dim).collect(),
            multiplicity: vec![1; dim],
        }
    }

    /// Checks that every source position is in range and used at least once.
    pub fn from_sources(old_dim: usize, src_index: Vec<usize>) -> Result<Self> {
        let mut multiplicity = vec![0usize; old_dim];
        for &s in &src_index {
            *multiplicity.get_mut(s).ok_or_else(|| {
                Error::Growth(format!("source index {s} out of range {old_dim}"))
            })? += 1;
        }
        if let Some(j) = multiplicity.iter().position(|&m| m == 0) {
            return Err(Error::Growth(format!(
                "source position {j} is never copied"
            )));
        }
        Ok(WidthMap {
            src_index,
            multiplicity,
        })
    }

    /// Head-granular map: each of `groups` groups grows from `old_heads` to
    /// `new_heads` heads circularly, and every head carries `head_dim`
    /// consecutive columns.
    pub fn grouped(
        groups: usize,
        old_heads: usize,
        new_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let heads = Self::circular(old_heads, new_heads)?;
        let mut src = Vec::with_capacity(groups * new_heads * head_dim);
        for g in 0..groups {
            for &h in &heads.src_index {
                for c in 0..head_dim {
                    src.push((g * old_heads + h) * head_dim + c);
                }
            }
        }
        Self::from_sources(groups * old_heads * head_dim, src)
    }

    pub fn old_dim(&self) -> usize {
        self.multiplicity.len()
    }

    pub fn new_dim(&self) -> usize {
        self.src_index.len()
    }

    pub fn src_index(&self) -> &[usize] {
        &self.src_index
    }

    pub fn multiplicity(&self) -> &[usize] {
        &self.multiplicity
    }

    /// Positions that are not the first copy of their source.
    pub fn fresh_positions(&self) -> Vec<bool> {
        let mut seen = vec![false; self.old_dim()];
        self.src_index
            .iter()
            .map(|&s| std::mem::replace(&mut seen[s], true))
            .collect()
    }

    pub fn is_identity(&self) -> bool {
        self.src_index.iter().enumerate().all(|(i, &s)| i == s) && self.new_dim() == self.old_dim()
    }

    /// Every source copied the same number of times.
    pub fn is_uniform(&self) -> bool {
        self.multiplicity.windows(2).all(|w| w[0] == w[1])
    }

    /// Duplicates a vector along the map, e.g. hidden activations.
    pub fn duplicate<T: Copy>(&self, x: &[T]) -> Vec<T> {
        self.src_index.iter().map(|&s| x[s]).collect()
    }
}

pub fn build_width_map(old_dim: usize, new_dim: usize) -> Result<WidthMap> {
    WidthMap::circular(old_dim, new_dim)
}

/// Expands the input (row) axis: `W'[i, :] = W[src(i), :] / mult(src(i))`.
pub fn expand_in_axis<T: Scalar>(w: &Tensor<T>, map: &WidthMap) -> Result<Tensor<T>> {
    if !w.is_matrix() || w.shape()[0] != map.old_dim() {
        return Err(Error::Growth(format!(
            "input axis of {:?} does not match map from {}",
            w.shape(),
            map.old_dim()
        )));
    }
    let cols = w.shape()[1];
    let mut data = Vec::with_capacity(map.new_dim() * cols);
    for &s in map.src_index() {
        let div = T::from_usize(map.multiplicity()[s]);
        data.extend(w.data()[s * cols..(s + 1) * cols].iter().map(|&v| v / div));
    }
    Tensor::new(vec![map.new_dim(), cols], data)
}

/// Expands the output (column) axis by duplication. With a donor, fresh
/// positions copy the donor's column instead of the tensor's own.
pub fn expand_out_axis<T: Scalar>(
    w: &Tensor<T>,
    map: &WidthMap,
    donor: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, cols) = w.matrix_dims();
    if cols != map.old_dim() {
        return Err(Error::Growth(format!(
            "output axis of {:?} does not match map from {}",
            w.shape(),
            map.old_dim()
        )));
    }
    if let Some(d) = donor {
        if d.shape() != w.shape() {
            return Err(Error::Growth(format!(
                "donor shape {:?} differs from {:?}",
                d.shape(),
                w.shape()
            )));
        }
    }
    let fresh = map.fresh_positions();
    let n = map.new_dim();
    let mut data = Vec::with_capacity(rows * n);
    for r in 0..rows {
        for (i, &s) in map.src_index().iter().enumerate() {
            let from = match donor {
                Some(d) if fresh[i] => d,
                _ => w,
            };
            data.push(from.data()[r * cols + s]);
        }
    }
    let shape = if w.is_matrix() {
        vec![rows, n]
    } else {
        vec![n]
    };
    Tensor::new(shape, data)
}

fn expand_both<T: Scalar>(
    w: &Tensor<T>,
    in_map: &WidthMap,
    out_map: &WidthMap,
    donor: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let own = expand_in_axis(w, in_map)?;
    let donor = donor.map(|d| expand_in_axis(d, in_map)).transpose()?;
    expand_out_axis(&own, out_map, donor.as_ref())
}

fn expand_bias<T: Scalar>(
    b: &Option<Tensor<T>>,
    map: &WidthMap,
    donor: Option<&Option<Tensor<T>>>,
) -> Result<Option<Tensor<T>>> {
    b.as_ref()
        .map(|t| expand_out_axis(t, map, donor.and_then(|d| d.as_ref())))
        .transpose()
}

/// Query-head and key/value-head maps for growing `src` heads to `target_heads`.
///
/// With matching group counts, query heads grow inside each group and the
/// shared key/value heads stay as they are. A multi-head source grown into a
/// multi-head target duplicates whole heads on all four projections.
pub fn head_maps(
    src: &ModelConfig,
    target_heads: usize,
    target_kv_groups: usize,
) -> Result<(WidthMap, WidthMap)> {
    let hd = src.head_dim;
    if target_heads < src.n_heads {
        return Err(Error::Growth(format!(
            "cannot shrink heads {} → {target_heads}",
            src.n_heads
        )));
    }
    if target_kv_groups == src.kv_groups {
        if !target_heads.is_multiple_of(src.kv_groups) {
            return Err(Error::Growth(format!(
                "target heads {target_heads} not divisible by kv_groups {}",
                src.kv_groups
            )));
        }
        let q = WidthMap::grouped(
            src.kv_groups,
            src.heads_per_group(),
            target_heads / src.kv_groups,
            hd,
        )?;
        Ok((q, WidthMap::identity(src.kv_dim())))
    } else if src.kv_groups == src.n_heads && target_kv_groups == target_heads {
        let q = WidthMap::grouped(1, src.n_heads, target_heads, hd)?;
        Ok((q.clone(), q))
    } else {
        Err(Error::Growth(format!(
            "kv_groups must match between source and target ({} vs {target_kv_groups}); \
             only multi-head → multi-head growth may change it",
            src.kv_groups
        )))
    }
}

/// Grows the attention sublayer: hidden input axis by `hidden`, query heads
/// (and key/value heads for MHA) by [`head_maps`], output axis by `hidden`.
pub fn expand_heads<T: Scalar>(
    attn: &Attention<T>,
    src: &ModelConfig,
    target_heads: usize,
    target_kv_groups: usize,
    hidden: &WidthMap,
    donor: Option<&Attention<T>>,
) -> Result<Attention<T>> {
    let (q_map, kv_map) = head_maps(src, target_heads, target_kv_groups)?;
    Ok(Attention {
        wq: expand_both(&attn.wq, hidden, &q_map, donor.map(|d| &d.wq))?,
        wk: expand_both(&attn.wk, hidden, &kv_map, donor.map(|d| &d.wk))?,
        wv: expand_both(&attn.wv, hidden, &kv_map, donor.map(|d| &d.wv))?,
        q_bias: expand_bias(&attn.q_bias, &q_map, donor.map(|d| &d.q_bias))?,
        k_bias: expand_bias(&attn.k_bias, &kv_map, donor.map(|d| &d.k_bias))?,
        v_bias: expand_bias(&attn.v_bias, &kv_map, donor.map(|d| &d.v_bias))?,
        wo: expand_both(&attn.wo, &q_map, hidden, donor.map(|d| &d.wo))?,
    })
}

fn expand_mlp<T: Scalar>(
    mlp: &Mlp<T>,
    hidden: &WidthMap,
    inter: &WidthMap,
    donor: Option<&Mlp<T>>,
) -> Result<Mlp<T>> {
    Ok(Mlp {
        w_gate: expand_both(&mlp.w_gate, hidden, inter, donor.map(|d| &d.w_gate))?,
        w_up: expand_both(&mlp.w_up, hidden, inter, donor.map(|d| &d.w_up))?,
        w_down: expand_both(&mlp.w_down, inter, hidden, donor.map(|d| &d.w_down))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthMethod {
    Fpi,
    Aki,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    Stack,
    Interpolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthPlan {
    pub method: WidthMethod,
    pub depth_mode: DepthMode,
    pub source_config: ModelConfig,
    pub target_config: ModelConfig,
}

impl GrowthPlan {
    pub fn validate(&self) -> Result<()> {
        let (s, t) = (&self.source_config, &self.target_config);
        s.validate()?;
        t.validate()?;
        check_growable(s, t)
    }
}

fn check_growable(s: &ModelConfig, t: &ModelConfig) -> Result<()> {
    let fail = |msg: String| Err(Error::Growth(msg));
    if t.head_dim != s.head_dim {
        return fail(format!(
            "head_dim must stay fixed ({} → {}); grow the head count instead",
            s.head_dim, t.head_dim
        ));
    }
    let mha_to_mha = s.kv_groups == s.n_heads && t.kv_groups == t.n_heads;
    if t.kv_groups != s.kv_groups && !mha_to_mha {
        return fail(format!(
            "kv_groups must match between source and target ({} vs {})",
            s.kv_groups, t.kv_groups
        ));
    }
    if t.vocab_size != s.vocab_size || t.qkv_bias != s.qkv_bias {
        return fail("vocab_size and qkv_bias must match".into());
    }
    for (name, a, b) in [
        ("n_layers", s.n_layers, t.n_layers),
        ("hidden_dim", s.hidden_dim, t.hidden_dim),
        ("n_heads", s.n_heads, t.n_heads),
        ("intermediate_dim", s.intermediate_dim, t.intermediate_dim),
    ] {
        if b < a {
            return fail(format!("{name} cannot shrink ({a} → {b})"));
        }
    }
    Ok(())
}

fn expand_width<T: Scalar>(
    ckpt: &Checkpoint<T>,
    target: &ModelConfig,
    method: WidthMethod,
) -> Result<Checkpoint<T>> {
    if ckpt.is_moe() {
        return Err(Error::Growth(
            "width growth of mixture-of-experts checkpoints is not supported".into(),
        ));
    }
    let src = &ckpt.config;
    target.validate()?;
    check_growable(src, target)?;
    if target.n_layers != src.n_layers {
        return Err(Error::Growth(format!(
            "width expansion keeps depth ({} layers) but target has {}",
            src.n_layers, target.n_layers
        )));
    }
    let hidden = WidthMap::circular(src.hidden_dim, target.hidden_dim)?;
    let inter = WidthMap::circular(src.intermediate_dim, target.intermediate_dim)?;
    let net = Net::from_checkpoint(ckpt)?;

    let mut blocks = Vec::with_capacity(net.blocks.len());
    for (l, b) in net.blocks.iter().enumerate() {
        let donor: Option<&Block<T>> = match method {
            WidthMethod::Aki => net.blocks.get(l + 1),
            WidthMethod::Fpi => None,
        };
        let Ffn::Dense(mlp) = &b.ffn else {
            unreachable!("dense checkpoint with moe block")
        };
        let donor_mlp = donor.map(|d| match &d.ffn {
            Ffn::Dense(m) => m,
            Ffn::Moe { .. } => unreachable!(),
        });
        blocks.push(Block {
            attn_norm: expand_out_axis(&b.attn_norm, &hidden, None)?,
            attn: expand_heads(
                &b.attn,
                src,
                target.n_heads,
                target.kv_groups,
                &hidden,
                donor.map(|d| &d.attn),
            )?,
            mlp_norm: expand_out_axis(&b.mlp_norm, &hidden, None)?,
            ffn: Ffn::Dense(expand_mlp(mlp, &hidden, &inter, donor_mlp)?),
        });
    }
    Net {
        config: target.clone(),
        moe: None,
        embed: expand_out_axis(&net.embed, &hidden, None)?,
        blocks,
        final_norm: expand_out_axis(&net.final_norm, &hidden, None)?,
        unembed: expand_in_axis(&net.unembed, &hidden)?,
    }
    .to_checkpoint()
}

/// Function-preserving width expansion.
pub fn fpi_expand<T: Scalar>(ckpt: &Checkpoint<T>, target: &ModelConfig) -> Result<Checkpoint<T>> {
    expand_width(ckpt, target, WidthMethod::Fpi)
}

/// Width expansion whose fresh output slices of layer `l` come from layer
/// `l + 1`; the top layer falls back to [`fpi_expand`]'s self-copy.
pub fn aki_expand<T: Scalar>(ckpt: &Checkpoint<T>, target: &ModelConfig) -> Result<Checkpoint<T>> {
    expand_width(ckpt, target, WidthMethod::Aki)
}

/// Source layer of each target layer.
pub fn depth_sources(
    source_layers: usize,
    target_layers: usize,
    mode: DepthMode,
) -> Result<Vec<usize>> {
    if source_layers == 0 || target_layers < source_layers {
        return Err(Error::Growth(format!(
            "cannot grow {source_layers} layers to {target_layers}"
        )));
    }
    Ok((0..target_layers)
        .map(|l| match mode {
            DepthMode::Stack => l % source_layers,
            DepthMode::Interpolate => l * source_layers / target_layers,
        })
        .collect())
}

/// Copies whole layers according to [`depth_sources`]; embeddings and the
/// final norm are carried over unchanged.
pub fn grow_depth<T: Scalar>(
    ckpt: &Checkpoint<T>,
    target_layers: usize,
    mode: DepthMode,
) -> Result<Checkpoint<T>> {
    let sources = depth_sources(ckpt.config.n_layers, target_layers, mode)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in ckpt.tensors() {
        if names::split_layer(name).is_none() {
            tensors.insert(name.clone(), t.clone());
        }
    }
    for (dst, &src) in sources.iter().enumerate() {
        for (name, t) in ckpt.tensors() {
            if let Some((l, leaf)) = names::split_layer(name) {
                if l == src {
                    tensors.insert(names::layer(dst, leaf), t.clone());
                }
            }
        }
    }
    let config = ModelConfig {
        n_layers: target_layers,
        ..ckpt.config.clone()
    };
    Checkpoint::new(config, ckpt.moe.clone(), tensors)
}

/// Width expansion to the target's width, then depth growth to its depth.
pub fn scale_up<T: Scalar>(ckpt: &Checkpoint<T>, plan: &GrowthPlan) -> Result<Checkpoint<T>> {
    plan.validate()?;
    if ckpt.config != plan.source_config {
        return Err(Error::Growth(
            "checkpoint config differs from the plan's source_config".into(),
        ));
    }
    let width_target = ModelConfig {
        n_layers: plan.source_config.n_layers,
        ..plan.target_config.clone()
    };
    let wide = expand_width(ckpt, &width_target, plan.method)?;
    grow_depth(&wide, plan.target_config.n_layers, plan.depth_mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub n_probes: usize,
    pub probe_len: usize,
    pub max_abs_logit_diff: f64,
    /// Absolute difference of the mean next-token loss over all probes.
    pub loss_diff: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compares the two models' logits on `n_probes` random token sequences.
pub fn verify_preservation<A: Scalar, B: Scalar>(
    src: &Checkpoint<A>,
    dst: &Checkpoint<B>,
    n_probes: usize,
    seed: u64,
    tol: f64,
) -> Result<PreservationReport> {
    let vocab = src.config.vocab_size;
    if dst.config.vocab_size != vocab {
        return Err(Error::Growth(format!(
            "vocabulary mismatch: {} vs {}",
            vocab, dst.config.vocab_size
        )));
    }
    if n_probes == 0 {
        return Err(Error::Input("need at least one probe".into()));
    }
    let probe_len = src
        .config
        .context_length
        .min(dst.config.context_length)
        .min(32);
    let a = Net::from_checkpoint(src)?.cast::<f64>();
    let b = Net::from_checkpoint(dst)?.cast::<f64>();
    let mut r = rng::seeded(seed, 0xB0B);
    let mut max_diff = 0.0f64;
    let (mut loss_a, mut loss_b, mut n) = (0.0, 0.0, 0usize);
    for _ in 0..n_probes {
        let tokens: Vec<u32> = (0..probe_len)
            .map(|_| r.random_range(0..vocab as u32))
            .collect();
        let ta = a.trace(&tokens)?;
        let tb = b.trace(&tokens)?;
        for (x, y) in ta.logits.iter().zip(&tb.logits) {
            max_diff = max_diff.max((x - y).abs());
        }
        loss_a += ta.loss.iter().sum::<f64>();
        loss_b += tb.loss.iter().sum::<f64>();
        n += ta.loss.len();
    }
    let loss_diff = if n == 0 {
        0.0
    } else {
        (loss_a - loss_b).abs() / n as f64
    };
    Ok(PreservationReport {
        n_probes,
        probe_len,
        max_abs_logit_diff: max_diff,
        loss_diff,
        tol,
        pass: max_diff <= tol,
    })
}

/// Number of bitwise-identical output-slice (column) pairs per matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetryReport {
    pub duplicate_pairs: BTreeMap<String, usize>,
}

impl SymmetryReport {
    pub fn total(&self) -> usize {
        self.duplicate_pairs.values().sum()
    }

    pub fn get(&self, name: &str) -> usize {
        self.duplicate_pairs.get(name).copied().unwrap_or(0)
    }
}

pub fn symmetry_report<T: Scalar>(ckpt: &Checkpoint<T>) -> SymmetryReport {
    let mut out = BTreeMap::new();
    for (name, t) in ckpt.tensors() {
        if !t.is_matrix() {
            continue;
        }
        let (_, cols) = t.matrix_dims();
        let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
        for j in 0..cols {
            let key = t.column(j).into_iter().map(Scalar::bits).collect();
            *counts.entry(key).or_default() += 1;
        }
        let pairs = counts.values().map(|&c| c * (c - 1) / 2).sum();
        out.insert(name.clone(), pairs);
    }
    SymmetryReport {
        duplicate_pairs: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_forward, mlp_forward, random_init_with};

    fn cfg(layers: usize, heads: usize, kv: usize, inter: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            hidden_dim: heads * 4,
            n_heads: heads,
            head_dim: 4,
            kv_groups: kv,
            intermediate_dim: inter,
            vocab_size: 16,
            qkv_bias: true,
            context_length: 16,
        }
    }

    fn mat(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed, 1);
        rng::normal_tensor(&[rows, cols], 1.0, &mut r)
    }

    #[test]
    fn width_map_examples() {
        let m = build_width_map(2, 3).unwrap();
        assert_eq!(m.src_index(), &[0, 1, 0]);
        assert_eq!(m.multiplicity(), &[2, 1]);
        let m = build_width_map(2, 4).unwrap();
        assert_eq!(m.src_index(), &[0, 1, 0, 1]);
        assert_eq!(m.multiplicity(), &[2, 2]);
        let id = build_width_map(5, 5).unwrap();
        assert!(id.is_identity());
        assert_eq!(id.multiplicity(), &[1; 5]);
        assert!(build_width_map(4, 3).is_err());
    }

    #[test]
    fn split_rule_on_input_axis() {
        let w = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = build_width_map(2, 3).unwrap();
        let e = expand_in_axis(&w, &m).unwrap();
        assert_eq!(e.shape(), &[3, 3]);
        assert_eq!(e.data(), &[0.5, 1.0, 1.5, 4.0, 5.0, 6.0, 0.5, 1.0, 1.5]);
        assert!(expand_in_axis(&w, &WidthMap::identity(2))
            .unwrap()
            .bitwise_eq(&w));
        assert!(expand_in_axis(&w, &build_width_map(3, 4).unwrap()).is_err());
    }

    #[test]
    fn duplicated_input_preserves_product() {
        let w: Tensor<f32> = mat(8, 16, 3).cast();
        let m = build_width_map(8, 13).unwrap();
        let e = expand_in_axis(&w, &m).unwrap();
        let x: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).cos()).collect();
        let xe = m.duplicate(&x);
        for o in 0..16 {
            let y: f32 = (0..8).map(|i| x[i] * w.get(i, o)).sum();
            let ye: f32 = (0..13).map(|i| xe[i] * e.get(i, o)).sum();
            assert!((y - ye).abs() < 1e-6, "{y} vs {ye}");
        }
    }

    #[test]
    fn output_axis_duplication_and_donor() {
        // Three output neurons grown to four: neuron 3 copies neuron 0.
        let w = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let next = Tensor::new(vec![2, 3], vec![7.0f32, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let m = build_width_map(3, 4).unwrap();
        let fpi = expand_out_axis(&w, &m, None).unwrap();
        assert_eq!(fpi.data(), &[1.0, 2.0, 3.0, 1.0, 4.0, 5.0, 6.0, 4.0]);
        let aki = expand_out_axis(&w, &m, Some(&next)).unwrap();
        assert_eq!(aki.data(), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 10.0]);
        assert!(expand_out_axis(&w, &WidthMap::identity(3), None)
            .unwrap()
            .bitwise_eq(&w));
        let bad = Tensor::<f32>::zeros(&[3, 3]);
        assert!(expand_out_axis(&w, &m, Some(&bad)).is_err());
    }

    #[test]
    fn two_linear_mlp_preserves_output() {
        // y = Uᵀ Wᵀ x with in/out 2 → 3 and intermediate 3 → 4.
        let w = mat(2, 3, 1);
        let u = mat(3, 2, 2);
        let io = build_width_map(2, 3).unwrap();
        let mid = build_width_map(3, 4).unwrap();
        let w2 = expand_out_axis(&expand_in_axis(&w, &io).unwrap(), &mid, None).unwrap();
        let u2 = expand_out_axis(&expand_in_axis(&u, &mid).unwrap(), &io, None).unwrap();
        let x = [0.3, -1.1];
        let fwd = |w: &Tensor<f64>, u: &Tensor<f64>, x: &[f64]| {
            let h = crate::ops::linear(x, 1, w, None);
            crate::ops::linear(&h, 1, u, None)
        };
        let y = fwd(&w, &u, &x);
        let y2 = fwd(&w2, &u2, &io.duplicate(&x));
        let expect = io.duplicate(&y);
        for (a, b) in y2.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn attn_of(c: &ModelConfig, seed: u64) -> Attention<f64> {
        let ck = random_init_with::<f64>(c, None, seed, 0.5).unwrap();
        Net::from_checkpoint(&ck).unwrap().blocks[0].attn.clone()
    }

    #[test]
    fn gqa_head_expansion_preserves_attention() {
        // 2 groups × 2 query heads → 2 groups × 4 query heads.
        let src = cfg(1, 4, 2, 8);
        let attn = attn_of(&src, 4);
        let hidden = build_width_map(16, 32).unwrap();
        let grown = expand_heads(&attn, &src, 8, 2, &hidden, None).unwrap();
        assert_eq!(grown.wk.shape(), &[32, 8]);
        assert_eq!(grown.wq.shape(), &[32, 32]);

        let t = 5;
        let x: Vec<f64> = (0..t * 16).map(|i| (i as f64 * 0.31).sin()).collect();
        let xd: Vec<f64> = x.chunks(16).flat_map(|r| hidden.duplicate(r)).collect();
        let y = attention_forward(&attn, 4, &x, t);
        let yd = attention_forward(&grown, 4, &xd, t);
        for r in 0..t {
            let expect = hidden.duplicate(&y[r * 16..(r + 1) * 16]);
            for (a, b) in yd[r * 32..(r + 1) * 32].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_head_count_touches_only_hidden_axis() {
        let src = cfg(1, 4, 2, 8);
        let attn = attn_of(&src, 5);
        let hidden = WidthMap::identity(16);
        let same = expand_heads(&attn, &src, 4, 2, &hidden, None).unwrap();
        assert_eq!(same, attn);
    }

    #[test]
    fn mha_growth_duplicates_whole_heads() {
        let src = cfg(1, 2, 2, 8);
        let attn = attn_of(&src, 6);
        let hidden = build_width_map(8, 16).unwrap();
        let grown = expand_heads(&attn, &src, 4, 4, &hidden, None).unwrap();
        assert_eq!(grown.wk.shape(), &[16, 16]);
        // head 2 repeats head 0 on q, k and v
        for w in [&grown.wq, &grown.wk, &grown.wv] {
            for c in 0..4 {
                assert_eq!(w.column(c), w.column(8 + c));
            }
        }
        let t = 4;
        let x: Vec<f64> = (0..t * 8).map(|i| (i as f64 * 0.17).cos()).collect();
        let xd: Vec<f64> = x.chunks(8).flat_map(|r| hidden.duplicate(r)).collect();
        let y = attention_forward(&attn, 4, &x, t);
        let yd = attention_forward(&grown, 4, &xd, t);
        for r in 0..t {
            let expect = hidden.duplicate(&y[r * 8..(r + 1) * 8]);
            for (a, b) in yd[r * 16..(r + 1) * 16].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(expand_heads(&attn, &src, 4, 2, &hidden, None).is_ok());
        assert!(expand_heads(&attn, &src, 4, 1, &hidden, None).is_err());
    }

    #[test]
    fn mlp_expansion_preserves_output() {
        let src = cfg(1, 2, 1, 6);
        let ck = random_init_with::<f64>(&src, None, 2, 0.5).unwrap();
        let Ffn::Dense(mlp) = &Net::from_checkpoint(&ck).unwrap().blocks[0].ffn else {
            panic!()
        };
        let hidden = build_width_map(8, 16).unwrap();
        let inter = build_width_map(6, 9).unwrap();
        let grown = expand_mlp(mlp, &hidden, &inter, None).unwrap();
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let y = mlp_forward(mlp, &x, 1);
        let y2 = mlp_forward(&grown, &hidden.duplicate(&x), 1);
        for (a, b) in y2.iter().zip(hidden.duplicate(&y)) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn depth_goldens() {
        assert_eq!(
            depth_sources(3, 6, DepthMode::Interpolate).unwrap(),
            vec![0, 0, 1, 1, 2, 2]
        );
        assert_eq!(
            depth_sources(3, 6, DepthMode::Stack).unwrap(),
            vec![0, 1, 2, 0, 1, 2]
        );
        for mode in [DepthMode::Stack, DepthMode::Interpolate] {
            assert_eq!(depth_sources(3, 3, mode).unwrap(), vec![0, 1, 2]);
        }
        assert!(depth_sources(3, 2, DepthMode::Stack).is_err());
    }

    #[test]
    fn grow_depth_copies_layers() {
        let c = cfg(2, 2, 1, 8);
        let ck = random_init_with::<f32>(&c, None, 1, 0.02).unwrap();
        let deep = grow_depth(&ck, 4, DepthMode::Interpolate).unwrap();
        assert_eq!(deep.config.n_layers, 4);
        assert!(deep
            .tensor("layers.1.attn.wq")
            .unwrap()
            .bitwise_eq(ck.tensor("layers.0.attn.wq").unwrap()));
        assert!(deep
            .tensor("layers.2.mlp.w_up")
            .unwrap()
            .bitwise_eq(ck.tensor("layers.1.mlp.w_up").unwrap()));
        assert!(deep
            .tensor("embed")
            .unwrap()
            .bitwise_eq(ck.tensor("embed").unwrap()));
        assert!(grow_depth(&ck, 2, DepthMode::Stack)
            .unwrap()
            .bitwise_eq(&ck));
    }

    #[test]
    fn plan_rejects_group_and_head_dim_changes() {
        let s = cfg(2, 4, 2, 8);
        let mut t = cfg(2, 8, 4, 16);
        let plan = |t: &ModelConfig| GrowthPlan {
            method: WidthMethod::Fpi,
            depth_mode: DepthMode::Stack,
            source_config: s.clone(),
            target_config: t.clone(),
        };
        let err = plan(&t).validate().unwrap_err();
        assert!(err.to_string().contains("kv_groups"));
        t.kv_groups = 2;
        assert!(plan(&t).validate().is_ok());
        let wide_heads = ModelConfig {
            head_dim: 8,
            n_heads: 4,
            hidden_dim: 32,
            ..t.clone()
        };
        assert!(plan(&wide_heads)
            .validate()
            .unwrap_err()
            .to_string()
            .contains("head_dim"));
        let shallower = ModelConfig { n_layers: 1, ..t };
        assert!(plan(&shallower).validate().is_err());
    }

    #[test]
    fn plan_json_shape() {
        let p = GrowthPlan {
            method: WidthMethod::Aki,
            depth_mode: DepthMode::Interpolate,
            source_config: cfg(2, 2, 1, 8),
            target_config: cfg(4, 4, 1, 16),
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["method"], "aki");
        assert_eq!(v["depth_mode"], "interpolate");
        assert_eq!(serde_json::from_value::<GrowthPlan>(v).unwrap(), p);
    }
}
