//! AdamW continuous pretraining for toy models, with a linear-warmup cosine
//! schedule, CSV metric logs and a finite-difference gradient check.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{random_init_with, LossBreakdown, Net, Window};
use crate::moe::MoEConfig;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Learning-rate floor of the cosine decay, as a fraction of the peak.
pub const COSINE_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    /// Evaluate every this many steps (and after the last one).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_wd() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_eval_every() -> usize {
    10
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            warmup_steps: 20,
            total_steps: 200,
            batch_tokens: 256,
            seq_len: 32,
            seed: 0,
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so a run can be replayed without moving weights.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and ≥ 0 (got {})", self.lr));
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps".into());
        }
        if self.seq_len == 0 || self.batch_tokens < self.seq_len {
            return bad(format!(
                "batch_tokens ({}) must be ≥ seq_len ({}) > 0",
                self.batch_tokens, self.seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.partial_cmp(&0.0) != Some(Ordering::Greater)
        {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if !(0.0..=f64::MAX).contains(&self.weight_decay) || self.eval_every == 0 {
            return bad("weight_decay must be ≥ 0 and eval_every ≥ 1".into());
        }
        if let Some(c) = self.grad_clip {
            if c.partial_cmp(&0.0) != Some(Ordering::Greater) {
                return bad("grad_clip must be > 0".into());
            }
        }
        Ok(())
    }

    pub fn seqs_per_batch(&self) -> usize {
        self.batch_tokens / self.seq_len
    }

    /// Learning rate used for update `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps && self.warmup_steps > 0 {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (COSINE_FLOOR + (1.0 - COSINE_FLOOR) * cosine)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub lr: Option<f64>,
    pub eval_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    pub z_loss: Option<f64>,
}

/// Row 0 holds the evaluation before any update; row `s` holds the batch
/// loss seen by update `s`, its learning rate and, when scheduled, the
/// evaluation after that update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "step,train_loss,lr,eval_loss,aux_loss,z_loss";

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                cell(r.train_loss),
                cell(r.lr),
                cell(r.eval_loss),
                cell(r.aux_loss),
                cell(r.z_loss)
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows
            .iter()
            .filter_map(|r| r.eval_loss.map(|e| (r.step, e)))
    }

    pub fn initial_eval(&self) -> Option<f64> {
        self.evals().next().map(|(_, e)| e)
    }

    pub fn final_eval(&self) -> Option<f64> {
        self.evals().last().map(|(_, e)| e)
    }

    /// First evaluated step whose eval loss is at or below `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.evals().find(|&(_, e)| e <= threshold).map(|(s, _)| s)
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.train_loss).collect()
    }

    pub fn aux_losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.aux_loss).collect()
    }
}

fn sample_batch(data: &[u32], cfg: &TrainConfig, rng: &mut impl Rng) -> Vec<Window> {
    let max_start = data.len() - cfg.seq_len - 1;
    (0..cfg.seqs_per_batch())
        .map(|_| Window::from_stream(data, rng.random_range(0..=max_start), cfg.seq_len))
        .collect()
}

fn as_diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

struct AdamW {
    m: Net<f64>,
    v: Net<f64>,
    t: i32,
}

impl AdamW {
    fn new(params: &Net<f64>) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Net<f64>, grads: &mut Net<f64>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads
                .named()
                .iter()
                .flat_map(|(_, g)| g.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                grads
                    .tensors_mut()
                    .into_iter()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors_mut());
        for (((w, m), v), g) in tensors {
            let decay = if w.is_matrix() {
                lr * cfg.weight_decay
            } else {
                0.0
            };
            let (w, m, v, g) = (w.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                w[i] = w[i] - decay * w[i] - lr * update;
            }
        }
    }
}

/// Trains `ckpt` on random windows of `data`. Mixture-of-experts
/// checkpoints optimise the combined objective. Evaluation on `eval_data`
/// runs before the first update, every `eval_every` updates and after the
/// last one.
pub fn train<T: Scalar>(
    ckpt: &Checkpoint<T>,
    data: &[u32],
    eval_data: Option<&[u32]>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<f32>, MetricLog)> {
    cfg.validate()?;
    if data.len() < cfg.seq_len + 1 {
        return Err(Error::Input(format!(
            "training data has {} tokens, need at least {}",
            data.len(),
            cfg.seq_len + 1
        )));
    }
    let mut params = Net::from_checkpoint(ckpt)?.cast::<f64>();
    if let Some(&bad) = data.iter().find(|&&t| t as usize >= ckpt.config.vocab_size) {
        return Err(Error::Input(format!(
            "training data holds token {bad} outside vocabulary {}",
            ckpt.config.vocab_size
        )));
    }
    let mut opt = AdamW::new(&params);
    let mut rng = rng::seeded(cfg.seed, 0xDA7A);
    let eval = |p: &Net<f64>, step: usize| -> Result<Option<f64>> {
        eval_data
            .map(|d| p.eval_loss(d, cfg.seq_len).map_err(as_diverged(step)))
            .transpose()
    };

    let mut log = MetricLog {
        rows: vec![MetricRow {
            step: 0,
            eval_loss: eval(&params, 0)?,
            ..Default::default()
        }],
    };
    for step in 1..=cfg.total_steps {
        let batch = sample_batch(data, cfg, &mut rng);
        let (loss, mut grads): (LossBreakdown, Net<f64>) =
            params.loss_and_grad(&batch).map_err(as_diverged(step))?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss.total,
            });
        }
        let lr = cfg.lr_at(step);
        opt.step(&mut params, &mut grads, lr, cfg);
        let due = step % cfg.eval_every == 0 || step == cfg.total_steps;
        log.rows.push(MetricRow {
            step,
            train_loss: Some(loss.total),
            lr: Some(lr),
            eval_loss: if due { eval(&params, step)? } else { None },
            aux_loss: loss.aux,
            z_loss: loss.z,
        });
    }
    Ok((params.cast::<f32>().to_checkpoint()?, log))
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Standard deviation of the weights drawn for [`grad_check`]; large enough
/// that attention and routing are far from uniform.
pub const GRAD_CHECK_STD: f64 = 0.3;

/// Worst relative error between the analytic gradient and central
/// differences with step `eps`, over every parameter of a random model.
/// Experts of a mixture are drawn independently so the router gradient is
/// non-trivial.
pub fn grad_check(
    config: &ModelConfig,
    moe: Option<&MoEConfig>,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let ckpt: Checkpoint<f64> = random_init_with(config, moe, seed, GRAD_CHECK_STD)?;
    let net = Net::from_checkpoint(&ckpt)?;
    if net.param_count() > 10_000 {
        return Err(Error::Input(format!(
            "grad_check needs < 10k parameters, model has {}",
            net.param_count()
        )));
    }
    let mut r = rng::seeded(seed, 0x6C);
    let len = config.context_length.min(6);
    let batch: Vec<Window> = (0..2)
        .map(|_| {
            let toks: Vec<u32> = (0..=len)
                .map(|_| r.random_range(0..config.vocab_size as u32))
                .collect();
            Window::from_stream(&toks, 0, len)
        })
        .collect();
    let (_, grads) = net.loss_and_grad(&batch)?;
    let analytic: Vec<Tensor<f64>> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.tensors_mut()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + eps;
            let plus = probe.loss(&batch)?.total;
            probe.tensors_mut()[ti].data_mut()[i] = orig - eps;
            let minus = probe.loss(&batch)?.total;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            worst = worst.max(relative_error(g.data()[i], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_synthetic_corpus;
    use crate::model::{eval_loss, random_init};

    fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 8,
            n_heads: 2,
            head_dim: 4,
            kv_groups: 1,
            intermediate_dim: 16,
            vocab_size: 32,
            qkv_bias: false,
            context_length: 32,
        }
    }

    fn micro(bias: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden_dim: 4,
            n_heads: 2,
            head_dim: 2,
            kv_groups: 1,
            intermediate_dim: 6,
            vocab_size: 7,
            qkv_bias: bias,
            context_length: 8,
        }
    }

    fn quick(total: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            warmup_steps: total / 10,
            total_steps: total,
            batch_tokens: 128,
            seq_len: 16,
            seed: 5,
            eval_every: 10,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..Default::default()
        };
        assert!((cfg.lr_at(1) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.lr_at(10), 1.0);
        assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(110) - COSINE_FLOOR).abs() < 1e-12);
        let no_warm = TrainConfig {
            warmup_steps: 0,
            ..cfg
        };
        assert_eq!(no_warm.lr_at(0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_tokens: 8,
            seq_len: 16,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            warmup_steps: 300,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let ckpt = random_init(&toy(), 3).unwrap();
        let data = make_synthetic_corpus(1, 32, 4000, 1).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..quick(20)
        };
        let (out, log) = train(&ckpt, &data, Some(&data[..1000]), &cfg).unwrap();
        assert!(out.bitwise_eq(&ckpt));
        let evals: Vec<f64> = log.evals().map(|(_, e)| e).collect();
        assert!(evals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ckpt = random_init(&toy(), 4).unwrap();
        let data = make_synthetic_corpus(2, 32, 20_000, 1).unwrap();
        let held = make_synthetic_corpus(2, 32, 2_000, 1).unwrap();
        let cfg = quick(200);
        let (a, log_a) = train(&ckpt, &data, Some(&held), &cfg).unwrap();
        let (b, log_b) = train(&ckpt, &data, Some(&held), &cfg).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(log_a, log_b);
        let (first, last) = (log_a.initial_eval().unwrap(), log_a.final_eval().unwrap());
        assert!(last < first, "{first} → {last}");
        assert!((eval_loss(&a, &held, 16).unwrap() - last).abs() < 1e-4);
    }

    #[test]
    fn log_csv_layout() {
        let ckpt = random_init(&toy(), 1).unwrap();
        let data = make_synthetic_corpus(1, 32, 2000, 1).unwrap();
        let (_, log) = train(&ckpt, &data, Some(&data), &quick(12)).unwrap();
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 14);
        assert!(lines[1].starts_with("0,,,"));
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",,,"));
        assert_eq!(lines[11].split(',').filter(|c| !c.is_empty()).count(), 4);
        let steps: Vec<usize> = log.rows.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn divergence_reports_step() {
        let ckpt = random_init(&toy(), 1).unwrap();
        let data = make_synthetic_corpus(1, 32, 2000, 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e200,
            warmup_steps: 0,
            grad_clip: None,
            weight_decay: 0.0,
            ..quick(10)
        };
        match train(&ckpt, &data, None, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn tokens_out_of_vocab_rejected() {
        let ckpt = random_init(&toy(), 1).unwrap();
        let data: Vec<u32> = (0..200).map(|i| i % 40).collect();
        assert!(matches!(
            train(&ckpt, &data, None, &quick(2)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for bias in [false, true] {
            let err = grad_check(&micro(bias), None, 11, 1e-5).unwrap();
            assert!(err < 1e-3, "bias={bias}: {err}");
        }
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        let moe = MoEConfig {
            aux_coeff: 0.1,
            z_coeff: 0.05,
            ..MoEConfig::new(4, 2)
        };
        let err = grad_check(&micro(true), Some(&moe), 12, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn coarse_step_inflates_error() {
        let fine = grad_check(&micro(false), None, 13, 1e-5).unwrap();
        let coarse = grad_check(&micro(false), None, 13, 1e-1).unwrap();
        assert!(coarse > fine, "{coarse} vs {fine}");
    }
}
