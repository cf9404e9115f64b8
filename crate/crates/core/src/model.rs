//! Reference decoder-only transformer: pre-norm blocks of rotary GQA
//! attention and a SiLU-gated MLP (or a top-k mixture of such MLPs).
//!
//! All arithmetic runs in f64 regardless of the storage type; gradients are
//! hand-derived per layer.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{expected_shapes, names, Checkpoint};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::moe::{self, MoEConfig, Routing, RoutingStats};
use crate::ops;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub q_bias: Option<Tensor<T>>,
    pub k_bias: Option<Tensor<T>>,
    pub v_bias: Option<Tensor<T>>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ffn<T> {
    Dense(Mlp<T>),
    Moe {
        router: Tensor<T>,
        experts: Vec<Mlp<T>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub attn_norm: Tensor<T>,
    pub attn: Attention<T>,
    pub mlp_norm: Tensor<T>,
    pub ffn: Ffn<T>,
}

/// Typed view of a checkpoint, one [`Block`] per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    pub config: ModelConfig,
    pub moe: Option<MoEConfig>,
    pub embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn map<U>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Attention<U> {
        Attention {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            q_bias: self.q_bias.as_ref().map(f),
            k_bias: self.k_bias.as_ref().map(f),
            v_bias: self.v_bias.as_ref().map(f),
            wo: f(&self.wo),
        }
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn map<U>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Mlp<U> {
        Mlp {
            w_gate: f(&self.w_gate),
            w_up: f(&self.w_up),
            w_down: f(&self.w_down),
        }
    }

    fn leaves(&self) -> [(&'static str, &Tensor<T>); 3] {
        [
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn leaves_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w_gate, &mut self.w_up, &mut self.w_down]
    }
}

impl<T: Scalar> Block<T> {
    pub fn map<U>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> Block<U> {
        Block {
            attn_norm: f(&self.attn_norm),
            attn: self.attn.map(f),
            mlp_norm: f(&self.mlp_norm),
            ffn: match &self.ffn {
                Ffn::Dense(m) => Ffn::Dense(m.map(f)),
                Ffn::Moe { router, experts } => Ffn::Moe {
                    router: f(router),
                    experts: experts.iter().map(|e| e.map(f)).collect(),
                },
            },
        }
    }

    fn named(&self, l: usize) -> Vec<(String, &Tensor<T>)> {
        let a = &self.attn;
        let mut out = vec![
            (names::attn_norm(l), &self.attn_norm),
            (names::wq(l), &a.wq),
            (names::wk(l), &a.wk),
            (names::wv(l), &a.wv),
        ];
        if let (Some(q), Some(k), Some(v)) = (&a.q_bias, &a.k_bias, &a.v_bias) {
            out.push((names::q_bias(l), q));
            out.push((names::k_bias(l), k));
            out.push((names::v_bias(l), v));
        }
        out.push((names::wo(l), &a.wo));
        out.push((names::mlp_norm(l), &self.mlp_norm));
        match &self.ffn {
            Ffn::Dense(m) => {
                for (leaf, t) in m.leaves() {
                    out.push((names::mlp(l, leaf), t));
                }
            }
            Ffn::Moe { router, experts } => {
                out.push((names::router(l), router));
                for (e, m) in experts.iter().enumerate() {
                    for (leaf, t) in m.leaves() {
                        out.push((names::expert(l, e, leaf), t));
                    }
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let a = &mut self.attn;
        let mut out = vec![&mut self.attn_norm, &mut a.wq, &mut a.wk, &mut a.wv];
        if let (Some(q), Some(k), Some(v)) = (&mut a.q_bias, &mut a.k_bias, &mut a.v_bias) {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.push(&mut a.wo);
        out.push(&mut self.mlp_norm);
        match &mut self.ffn {
            Ffn::Dense(m) => out.extend(m.leaves_mut()),
            Ffn::Moe { router, experts } => {
                out.push(router);
                for m in experts {
                    out.extend(m.leaves_mut());
                }
            }
        }
        out
    }
}

impl<T: Scalar> Net<T> {
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let cfg = &ckpt.config;
        let get = |name: &str| ckpt.tensor(name).cloned();
        let get_opt = |name: String| -> Result<Option<Tensor<T>>> {
            if cfg.qkv_bias {
                Ok(Some(get(&name)?))
            } else {
                Ok(None)
            }
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mlp_at = |name: &dyn Fn(&str) -> String| -> Result<Mlp<T>> {
                Ok(Mlp {
                    w_gate: get(&name("w_gate"))?,
                    w_up: get(&name("w_up"))?,
                    w_down: get(&name("w_down"))?,
                })
            };
            let ffn = match &ckpt.moe {
                None => Ffn::Dense(mlp_at(&|leaf| names::mlp(l, leaf))?),
                Some(m) => Ffn::Moe {
                    router: get(&names::router(l))?,
                    experts: (0..m.n_experts)
                        .map(|e| mlp_at(&|leaf| names::expert(l, e, leaf)))
                        .collect::<Result<_>>()?,
                },
            };
            blocks.push(Block {
                attn_norm: get(&names::attn_norm(l))?,
                attn: Attention {
                    wq: get(&names::wq(l))?,
                    wk: get(&names::wk(l))?,
                    wv: get(&names::wv(l))?,
                    q_bias: get_opt(names::q_bias(l))?,
                    k_bias: get_opt(names::k_bias(l))?,
                    v_bias: get_opt(names::v_bias(l))?,
                    wo: get(&names::wo(l))?,
                },
                mlp_norm: get(&names::mlp_norm(l))?,
                ffn,
            });
        }
        Ok(Net {
            config: cfg.clone(),
            moe: ckpt.moe.clone(),
            embed: get(names::EMBED)?,
            blocks,
            final_norm: get(names::FINAL_NORM)?,
            unembed: get(names::UNEMBED)?,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let tensors = self
            .named()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect();
        Checkpoint::new(self.config.clone(), self.moe.clone(), tensors)
    }

    /// Every tensor with its canonical name, in a fixed order shared with
    /// [`Net::tensors_mut`].
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![(names::EMBED.to_string(), &self.embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(l));
        }
        out.push((names::FINAL_NORM.to_string(), &self.final_norm));
        out.push((names::UNEMBED.to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> Net<U> {
        Net {
            config: self.config.clone(),
            moe: self.moe.clone(),
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(&f)).collect(),
            final_norm: f(&self.final_norm),
            unembed: f(&self.unembed),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Net<U> {
        self.map(|t| t.cast())
    }

    pub fn zeros_like(&self) -> Net<f64> {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Random weights: zero-mean normal with std [`DEFAULT_INIT_STD`]; norm gains 1.
pub fn random_init(config: &ModelConfig, seed: u64) -> Result<Checkpoint<f32>> {
    random_init_with(config, None, seed, DEFAULT_INIT_STD)
}

/// Random weights with an explicit std; with `moe`, every expert and the
/// router are drawn independently.
pub fn random_init_with<T: Scalar>(
    config: &ModelConfig,
    moe: Option<&MoEConfig>,
    seed: u64,
    std: f64,
) -> Result<Checkpoint<T>> {
    config.validate()?;
    let mut rng = rng::seeded(seed, 0);
    let mut tensors = BTreeMap::new();
    for (name, shape) in expected_shapes(config, moe) {
        let is_gain = name == names::FINAL_NORM || name.ends_with("_norm");
        let t = if is_gain {
            Tensor::filled(&shape, T::one())
        } else {
            rng::normal_tensor(&shape, std, &mut rng)
        };
        tensors.insert(name, t);
    }
    Checkpoint::new(config.clone(), moe.cloned(), tensors)
}

/// One training/evaluation window: `targets[t]` is predicted from `inputs[..=t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Window {
    /// `seq_len` inputs starting at `start`, targets shifted by one.
    pub fn from_stream(tokens: &[u32], start: usize, seq_len: usize) -> Self {
        Window {
            inputs: tokens[start..start + seq_len].to_vec(),
            targets: tokens[start + 1..start + seq_len + 1].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub vocab: usize,
    /// Row-major `[seq_len, vocab]`.
    pub logits: Vec<f64>,
    /// Cross-entropy of token `t + 1` given the prefix up to `t`; length `seq_len - 1`.
    pub loss: Vec<f64>,
}

impl ForwardTrace {
    pub fn logits_at(&self, t: usize) -> &[f64] {
        &self.logits[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Mean losses of a batch. `aux` and `z` are averaged over MoE layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub aux: Option<f64>,
    pub z: Option<f64>,
    pub total: f64,
}

/// Gradients of the mean batch loss, one tensor per parameter tensor.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub loss: LossBreakdown,
    pub tensors: BTreeMap<String, Tensor<f64>>,
}

pub fn forward<T: Scalar>(ckpt: &Checkpoint<T>, tokens: &[u32]) -> Result<ForwardTrace> {
    Net::from_checkpoint(ckpt)?.cast::<f64>().trace(tokens)
}

/// Mean next-token cross-entropy over non-overlapping windows of `seq_len`.
pub fn eval_loss<T: Scalar>(ckpt: &Checkpoint<T>, data: &[u32], seq_len: usize) -> Result<f64> {
    Net::from_checkpoint(ckpt)?
        .cast::<f64>()
        .eval_loss(data, seq_len)
}

pub fn backward<T: Scalar>(ckpt: &Checkpoint<T>, batch: &[Window]) -> Result<GradientSet> {
    let net = Net::from_checkpoint(ckpt)?.cast::<f64>();
    let (loss, grads) = net.loss_and_grad(batch)?;
    Ok(GradientSet {
        loss,
        tensors: grads
            .named()
            .into_iter()
            .map(|(k, v)| (k, v.clone()))
            .collect(),
    })
}

/// Attention sublayer alone (no norm, no residual) on `rows` positions.
pub fn attention_forward(
    attn: &Attention<f64>,
    head_dim: usize,
    x: &[f64],
    rows: usize,
) -> Vec<f64> {
    attn_forward(attn, head_dim, x, rows).0
}

/// Dense MLP sublayer alone.
pub fn mlp_forward(mlp: &Mlp<f64>, x: &[f64], rows: usize) -> Vec<f64> {
    mlp_fwd(mlp, x, rows).0
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
}

struct MlpCache {
    gate_pre: Vec<f64>,
    up: Vec<f64>,
    h: Vec<f64>,
}

struct ExpertCall {
    cache: MlpCache,
    out: Vec<f64>,
}

enum FfnCache {
    Dense(MlpCache),
    Moe {
        routings: Vec<Routing>,
        /// `calls[t][j]` belongs to `routings[t].experts[j]`.
        calls: Vec<Vec<ExpertCall>>,
    },
}

struct LayerCache {
    x_in: Vec<f64>,
    inv_attn: Vec<f64>,
    a: Vec<f64>,
    attn: AttnCache,
    x_mid: Vec<f64>,
    inv_mlp: Vec<f64>,
    m: Vec<f64>,
    ffn: FfnCache,
}

struct SeqForward {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    inv_final: Vec<f64>,
    normed: Vec<f64>,
    logits: Vec<f64>,
}

/// Per-layer constants for the router auxiliary-loss gradients.
struct AuxGrad {
    f: Vec<Vec<f64>>,
    aux_scale: f64,
    z_scale: f64,
}

fn attn_forward(attn: &Attention<f64>, hd: usize, a: &[f64], t: usize) -> (Vec<f64>, AttnCache) {
    let n_heads = attn.wq.matrix_dims().1 / hd;
    let n_kv = attn.wk.matrix_dims().1 / hd;
    let per_group = n_heads / n_kv;
    let mut q = ops::linear(a, t, &attn.wq, attn.q_bias.as_ref());
    let mut k = ops::linear(a, t, &attn.wk, attn.k_bias.as_ref());
    let v = ops::linear(a, t, &attn.wv, attn.v_bias.as_ref());
    ops::rope(&mut q, t, n_heads, hd, false);
    ops::rope(&mut k, t, n_kv, hd, false);

    let scale = 1.0 / (hd as f64).sqrt();
    let qw = n_heads * hd;
    let kw = n_kv * hd;
    let mut probs = vec![0.0; n_heads * t * t];
    let mut o = vec![0.0; t * qw];
    let mut scores = vec![0.0; t];
    for h in 0..n_heads {
        let g = h / per_group;
        for i in 0..t {
            let qi = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            for u in 0..=i {
                let ku = &k[u * kw + g * hd..u * kw + (g + 1) * hd];
                scores[u] = qi.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            ops::softmax_in_place(&mut scores[..=i]);
            let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            row[..=i].copy_from_slice(&scores[..=i]);
            let oi = &mut o[i * qw + h * hd..i * qw + (h + 1) * hd];
            for u in 0..=i {
                let p = scores[u];
                let vu = &v[u * kw + g * hd..u * kw + (g + 1) * hd];
                for (acc, &vv) in oi.iter_mut().zip(vu) {
                    *acc += p * vv;
                }
            }
        }
    }
    let out = ops::linear(&o, t, &attn.wo, None);
    (out, AttnCache { q, k, v, probs, o })
}

fn attn_backward(
    attn: &Attention<f64>,
    hd: usize,
    a: &[f64],
    t: usize,
    cache: &AttnCache,
    dout: &[f64],
    g: &mut Attention<f64>,
) -> Vec<f64> {
    let n_heads = attn.wq.matrix_dims().1 / hd;
    let n_kv = attn.wk.matrix_dims().1 / hd;
    let per_group = n_heads / n_kv;
    let qw = n_heads * hd;
    let kw = n_kv * hd;
    let scale = 1.0 / (hd as f64).sqrt();

    let d_o = ops::linear_backward(&cache.o, t, &attn.wo, dout, &mut g.wo, None);
    let mut dq = vec![0.0; t * qw];
    let mut dk = vec![0.0; t * kw];
    let mut dv = vec![0.0; t * kw];
    let mut dp = vec![0.0; t];
    for h in 0..n_heads {
        let grp = h / per_group;
        for i in 0..t {
            let p = &cache.probs[(h * t + i) * t..(h * t + i) * t + i + 1];
            let doi = &d_o[i * qw + h * hd..i * qw + (h + 1) * hd];
            let mut dot = 0.0;
            for u in 0..=i {
                let vu = &cache.v[u * kw + grp * hd..u * kw + (grp + 1) * hd];
                dp[u] = doi.iter().zip(vu).map(|(a, b)| a * b).sum();
                dot += p[u] * dp[u];
                let dvu = &mut dv[u * kw + grp * hd..u * kw + (grp + 1) * hd];
                for (acc, &d) in dvu.iter_mut().zip(doi) {
                    *acc += p[u] * d;
                }
            }
            for u in 0..=i {
                let ds = p[u] * (dp[u] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    dq[i * qw + h * hd + c] += ds * cache.k[u * kw + grp * hd + c];
                    dk[u * kw + grp * hd + c] += ds * cache.q[i * qw + h * hd + c];
                }
            }
        }
    }
    ops::rope(&mut dq, t, n_heads, hd, true);
    ops::rope(&mut dk, t, n_kv, hd, true);
    let mut da = ops::linear_backward(a, t, &attn.wq, &dq, &mut g.wq, g.q_bias.as_mut());
    let dak = ops::linear_backward(a, t, &attn.wk, &dk, &mut g.wk, g.k_bias.as_mut());
    let dav = ops::linear_backward(a, t, &attn.wv, &dv, &mut g.wv, g.v_bias.as_mut());
    for ((x, y), z) in da.iter_mut().zip(dak).zip(dav) {
        *x += y + z;
    }
    da
}

fn mlp_fwd(mlp: &Mlp<f64>, m: &[f64], t: usize) -> (Vec<f64>, MlpCache) {
    let gate_pre = ops::linear(m, t, &mlp.w_gate, None);
    let up = ops::linear(m, t, &mlp.w_up, None);
    let h: Vec<f64> = gate_pre
        .iter()
        .zip(&up)
        .map(|(&g, &u)| ops::silu(g) * u)
        .collect();
    let y = ops::linear(&h, t, &mlp.w_down, None);
    (y, MlpCache { gate_pre, up, h })
}

fn mlp_backward(
    mlp: &Mlp<f64>,
    m: &[f64],
    t: usize,
    cache: &MlpCache,
    dy: &[f64],
    g: &mut Mlp<f64>,
) -> Vec<f64> {
    let dh = ops::linear_backward(&cache.h, t, &mlp.w_down, dy, &mut g.w_down, None);
    let mut dgate = vec![0.0; dh.len()];
    let mut dup = vec![0.0; dh.len()];
    for i in 0..dh.len() {
        let gp = cache.gate_pre[i];
        dgate[i] = dh[i] * cache.up[i] * ops::silu_grad(gp);
        dup[i] = dh[i] * ops::silu(gp);
    }
    let mut dm = ops::linear_backward(m, t, &mlp.w_gate, &dgate, &mut g.w_gate, None);
    let dm2 = ops::linear_backward(m, t, &mlp.w_up, &dup, &mut g.w_up, None);
    for (a, b) in dm.iter_mut().zip(dm2) {
        *a += b;
    }
    dm
}

fn data64(t: &Tensor<f64>) -> &[f64] {
    t.data()
}

impl Net<f64> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds context length {}",
                tokens.len(),
                self.config.context_length
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32]) -> Result<SeqForward> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let t = tokens.len();
        let mut x = Vec::with_capacity(t * d);
        let emb = self.embed.data();
        for &tok in tokens {
            x.extend_from_slice(&emb[tok as usize * d..(tok as usize + 1) * d]);
        }

        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, inv_attn) = ops::rmsnorm(&x, t, data64(&block.attn_norm));
            let (attn_out, attn) = attn_forward(&block.attn, cfg.head_dim, &a, t);
            let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let (m, inv_mlp) = ops::rmsnorm(&x_mid, t, data64(&block.mlp_norm));
            let (y, ffn) = match &block.ffn {
                Ffn::Dense(mlp) => {
                    let (y, c) = mlp_fwd(mlp, &m, t);
                    (y, FfnCache::Dense(c))
                }
                Ffn::Moe { router, experts } => {
                    let mcfg = self.moe.as_ref().expect("moe block without moe config");
                    let mut y = vec![0.0; t * d];
                    let mut routings = Vec::with_capacity(t);
                    let mut calls = Vec::with_capacity(t);
                    for r in 0..t {
                        let mr = &m[r * d..(r + 1) * d];
                        let routing = moe::route(mr, router, mcfg)?;
                        let mut row_calls = Vec::with_capacity(routing.experts.len());
                        for (&e, &gate) in routing.experts.iter().zip(&routing.gates) {
                            let (out, cache) = mlp_fwd(&experts[e], mr, 1);
                            for (acc, &o) in y[r * d..(r + 1) * d].iter_mut().zip(&out) {
                                *acc += gate * o;
                            }
                            row_calls.push(ExpertCall { cache, out });
                        }
                        routings.push(routing);
                        calls.push(row_calls);
                    }
                    (y, FfnCache::Moe { routings, calls })
                }
            };
            let x_out: Vec<f64> = x_mid.iter().zip(&y).map(|(a, b)| a + b).collect();
            layers.push(LayerCache {
                x_in: std::mem::replace(&mut x, x_out),
                inv_attn,
                a,
                attn,
                x_mid,
                inv_mlp,
                m,
                ffn,
            });
        }
        let (normed, inv_final) = ops::rmsnorm(&x, t, data64(&self.final_norm));
        let logits = ops::linear(&normed, t, &self.unembed, None);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(SeqForward {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            inv_final,
            normed,
            logits,
        })
    }

    pub fn trace(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        let fwd = self.run(tokens)?;
        let v = self.config.vocab_size;
        let loss = (0..tokens.len().saturating_sub(1))
            .map(|p| cross_entropy(&fwd.logits[p * v..(p + 1) * v], tokens[p + 1]))
            .collect();
        Ok(ForwardTrace {
            seq_len: tokens.len(),
            vocab: v,
            logits: fwd.logits,
            loss,
        })
    }

    pub fn eval_loss(&self, data: &[u32], seq_len: usize) -> Result<f64> {
        if seq_len == 0 || data.len() < seq_len + 1 {
            return Err(Error::Input(format!(
                "evaluation needs at least {} tokens, got {}",
                seq_len + 1,
                data.len()
            )));
        }
        let n_windows = (data.len() - 1) / seq_len;
        let sums: Vec<f64> = (0..n_windows)
            .into_par_iter()
            .map(|w| -> Result<f64> {
                let win = Window::from_stream(data, w * seq_len, seq_len);
                let fwd = self.run(&win.inputs)?;
                Ok(self.ce_sum(&fwd, &win.targets))
            })
            .collect::<Result<_>>()?;
        Ok(sums.iter().sum::<f64>() / (n_windows * seq_len) as f64)
    }

    fn ce_sum(&self, fwd: &SeqForward, targets: &[u32]) -> f64 {
        let v = self.config.vocab_size;
        targets
            .iter()
            .enumerate()
            .map(|(p, &tg)| cross_entropy(&fwd.logits[p * v..(p + 1) * v], tg))
            .sum()
    }

    fn batch_forward(
        &self,
        batch: &[Window],
    ) -> Result<(Vec<SeqForward>, LossBreakdown, Option<AuxGrad>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for w in batch {
            if w.inputs.len() != w.targets.len() {
                return Err(Error::Input(
                    "window inputs and targets differ in length".into(),
                ));
            }
            self.check_tokens(&w.targets)?;
        }
        let fwds: Vec<SeqForward> = batch
            .par_iter()
            .map(|w| self.run(&w.inputs))
            .collect::<Result<_>>()?;
        let n_targets: usize = batch.iter().map(|w| w.targets.len()).sum();
        let ce = fwds
            .iter()
            .zip(batch)
            .map(|(f, w)| self.ce_sum(f, &w.targets))
            .sum::<f64>()
            / n_targets as f64;

        let Some(mcfg) = &self.moe else {
            return Ok((
                fwds,
                LossBreakdown {
                    ce,
                    aux: None,
                    z: None,
                    total: ce,
                },
                None,
            ));
        };
        let n_layers = self.blocks.len();
        let mut aux = 0.0;
        let mut zl = 0.0;
        let mut fs = Vec::with_capacity(n_layers);
        let mut tokens = 0usize;
        for l in 0..n_layers {
            let routings = fwds.iter().flat_map(|f| match &f.layers[l].ffn {
                FfnCache::Moe { routings, .. } => routings.iter(),
                FfnCache::Dense(_) => unreachable!("dense layer in moe model"),
            });
            let stats = RoutingStats::from_routings(routings, mcfg.n_experts);
            tokens = stats.z.len();
            aux += moe::load_balance_loss(&stats, mcfg.n_experts);
            zl += moe::max_z_loss(&stats.z);
            fs.push(stats.f);
        }
        aux /= n_layers as f64;
        zl /= n_layers as f64;
        let total = moe::moe_total_loss(ce, aux, zl, mcfg);
        let grad = AuxGrad {
            f: fs,
            aux_scale: mcfg.aux_coeff / n_layers as f64 * mcfg.n_experts as f64 / tokens as f64,
            z_scale: mcfg.z_coeff / n_layers as f64 * 2.0 / tokens as f64,
        };
        Ok((
            fwds,
            LossBreakdown {
                ce,
                aux: Some(aux),
                z: Some(zl),
                total,
            },
            Some(grad),
        ))
    }

    /// Mean batch loss without gradients.
    pub fn loss(&self, batch: &[Window]) -> Result<LossBreakdown> {
        Ok(self.batch_forward(batch)?.1)
    }

    /// Mean batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[Window]) -> Result<(LossBreakdown, Net<f64>)> {
        let (fwds, loss, aux) = self.batch_forward(batch)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n_targets: usize = batch.iter().map(|w| w.targets.len()).sum();
        let ce_scale = 1.0 / n_targets as f64;
        let parts: Vec<Net<f64>> = fwds
            .par_iter()
            .zip(batch.par_iter())
            .map(|(f, w)| self.backward_seq(f, &w.targets, ce_scale, aux.as_ref()))
            .collect();
        let mut grads = self.zeros_like();
        for part in &parts {
            grads.add_assign(part);
        }
        Ok((loss, grads))
    }

    fn backward_seq(
        &self,
        fwd: &SeqForward,
        targets: &[u32],
        ce_scale: f64,
        aux: Option<&AuxGrad>,
    ) -> Net<f64> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let v = cfg.vocab_size;
        let t = fwd.tokens.len();
        let mut g = self.zeros_like();

        let mut dlogits = fwd.logits.clone();
        for (p, &tg) in targets.iter().enumerate() {
            let row = &mut dlogits[p * v..(p + 1) * v];
            ops::softmax_in_place(row);
            row[tg as usize] -= 1.0;
            row.iter_mut().for_each(|x| *x *= ce_scale);
        }
        let dnormed = ops::linear_backward(
            &fwd.normed,
            t,
            &self.unembed,
            &dlogits,
            &mut g.unembed,
            None,
        );
        let mut dx = ops::rmsnorm_backward(
            &fwd.x_final,
            t,
            self.final_norm.data(),
            &fwd.inv_final,
            &dnormed,
            g.final_norm.data_mut(),
        );

        for (l, (block, cache)) in self.blocks.iter().zip(&fwd.layers).enumerate().rev() {
            let gb = &mut g.blocks[l];
            let dm = match (&block.ffn, &cache.ffn, &mut gb.ffn) {
                (Ffn::Dense(mlp), FfnCache::Dense(c), Ffn::Dense(gm)) => {
                    mlp_backward(mlp, &cache.m, t, c, &dx, gm)
                }
                (
                    Ffn::Moe { router, experts },
                    FfnCache::Moe { routings, calls },
                    Ffn::Moe {
                        router: g_router,
                        experts: g_experts,
                    },
                ) => {
                    let aux = aux.expect("moe backward without routing statistics");
                    let renorm = self.moe.as_ref().is_some_and(|m| m.renormalize_gates);
                    let n_e = experts.len();
                    let mut dm = vec![0.0; t * d];
                    let mut dlogit_rows = vec![0.0; t * n_e];
                    for r in 0..t {
                        let routing = &routings[r];
                        let dyr = &dx[r * d..(r + 1) * d];
                        let mr = &cache.m[r * d..(r + 1) * d];
                        let mut dgates = Vec::with_capacity(routing.experts.len());
                        for ((&e, &gate), call) in
                            routing.experts.iter().zip(&routing.gates).zip(&calls[r])
                        {
                            dgates.push(dyr.iter().zip(&call.out).map(|(a, b)| a * b).sum::<f64>());
                            let dout: Vec<f64> = dyr.iter().map(|v| v * gate).collect();
                            let dmr = mlp_backward(
                                &experts[e],
                                mr,
                                1,
                                &call.cache,
                                &dout,
                                &mut g_experts[e],
                            );
                            for (acc, x) in dm[r * d..(r + 1) * d].iter_mut().zip(dmr) {
                                *acc += x;
                            }
                        }
                        // d loss / d prob over all experts
                        let mut dprob = vec![0.0; n_e];
                        if renorm {
                            let s: f64 = routing.experts.iter().map(|&e| routing.probs[e]).sum();
                            let mean: f64 =
                                dgates.iter().zip(&routing.gates).map(|(a, b)| a * b).sum();
                            for (&e, dg) in routing.experts.iter().zip(&dgates) {
                                dprob[e] = (dg - mean) / s;
                            }
                        } else {
                            for (&e, dg) in routing.experts.iter().zip(&dgates) {
                                dprob[e] = *dg;
                            }
                        }
                        for (dp, f) in dprob.iter_mut().zip(&aux.f[l]) {
                            *dp += aux.aux_scale * f;
                        }
                        let p = &routing.probs;
                        let dot: f64 = p.iter().zip(&dprob).map(|(a, b)| a * b).sum();
                        for e in 0..n_e {
                            dlogit_rows[r * n_e + e] =
                                p[e] * (dprob[e] - dot) + aux.z_scale * routing.z * p[e];
                        }
                    }
                    let dm_router =
                        ops::linear_backward(&cache.m, t, router, &dlogit_rows, g_router, None);
                    for (a, b) in dm.iter_mut().zip(dm_router) {
                        *a += b;
                    }
                    dm
                }
                _ => unreachable!("block, cache and gradient disagree on ffn kind"),
            };
            let dmid = ops::rmsnorm_backward(
                &cache.x_mid,
                t,
                block.mlp_norm.data(),
                &cache.inv_mlp,
                &dm,
                gb.mlp_norm.data_mut(),
            );
            for (a, b) in dx.iter_mut().zip(dmid) {
                *a += b;
            }
            let da = attn_backward(
                &block.attn,
                cfg.head_dim,
                &cache.a,
                t,
                &cache.attn,
                &dx,
                &mut gb.attn,
            );
            let din = ops::rmsnorm_backward(
                &cache.x_in,
                t,
                block.attn_norm.data(),
                &cache.inv_attn,
                &da,
                gb.attn_norm.data_mut(),
            );
            for (a, b) in dx.iter_mut().zip(din) {
                *a += b;
            }
        }

        let gemb = g.embed.data_mut();
        for (r, &tok) in fwd.tokens.iter().enumerate() {
            for (acc, x) in gemb[tok as usize * d..(tok as usize + 1) * d]
                .iter_mut()
                .zip(&dx[r * d..(r + 1) * d])
            {
                *acc += x;
            }
        }
        g
    }

    pub fn add_assign(&mut self, other: &Net<f64>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.1.data()) {
                *x += y;
            }
        }
    }
}

fn cross_entropy(logits: &[f64], target: u32) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}
