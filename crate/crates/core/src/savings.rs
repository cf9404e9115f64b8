//! Training-time and compute savings of a multi-phase plan against a
//! single from-scratch baseline run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::read_json;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub devices: u64,
    pub gflops_per_device: f64,
    #[serde(rename = "model_size_B")]
    pub model_size_b: f64,
    /// Billions of tokens trained in this phase.
    #[serde(rename = "trained_tokens_B")]
    pub trained_tokens_b: f64,
    /// Billions of tokens processed per day.
    #[serde(rename = "tokens_per_day_B")]
    pub tokens_per_day_b: f64,
}

impl PhaseSpec {
    pub fn cluster_gflops(&self) -> f64 {
        self.devices as f64 * self.gflops_per_device
    }

    pub fn days(&self) -> f64 {
        self.trained_tokens_b / self.tokens_per_day_b
    }

    pub fn gflops_days(&self) -> f64 {
        self.days() * self.cluster_gflops()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("devices", self.devices as f64),
            ("gflops_per_device", self.gflops_per_device),
            ("model_size_B", self.model_size_b),
            ("trained_tokens_B", self.trained_tokens_b),
            ("tokens_per_day_B", self.tokens_per_day_b),
        ];
        for (field, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Input(format!(
                    "phase {:?}: {field} must be > 0 (got {v})",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

fn check(phases: &[PhaseSpec], baseline: &PhaseSpec) -> Result<()> {
    if phases.is_empty() {
        return Err(Error::Input("plan has no phases".into()));
    }
    baseline.validate()?;
    phases.iter().try_for_each(PhaseSpec::validate)
}

fn total_tokens(phases: &[PhaseSpec]) -> f64 {
    phases.iter().map(|p| p.trained_tokens_b).sum()
}

/// Days the baseline needs for all the plan's tokens over the plan's days.
pub fn time_savings_factor(phases: &[PhaseSpec], baseline: &PhaseSpec) -> Result<f64> {
    check(phases, baseline)?;
    let baseline_days = total_tokens(phases) / baseline.tokens_per_day_b;
    Ok(baseline_days / phases.iter().map(PhaseSpec::days).sum::<f64>())
}

/// Baseline GFLOPS·days for all the plan's tokens over the plan's GFLOPS·days.
pub fn power_savings_factor(phases: &[PhaseSpec], baseline: &PhaseSpec) -> Result<f64> {
    check(phases, baseline)?;
    let baseline_cost =
        total_tokens(phases) * baseline.cluster_gflops() / baseline.tokens_per_day_b;
    Ok(baseline_cost / phases.iter().map(PhaseSpec::gflops_days).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub name: String,
    pub days: f64,
    pub gflops_days: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub time_factor: f64,
    pub power_factor: f64,
    pub phases: Vec<PhaseCost>,
    pub baseline_days: f64,
    pub baseline_gflops_days: f64,
}

/// Phases plus the from-scratch baseline; the on-disk plan format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavingsPlan {
    pub phases: Vec<PhaseSpec>,
    pub baseline: PhaseSpec,
}

impl SavingsPlan {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn report(&self) -> Result<SavingsReport> {
        let time_factor = time_savings_factor(&self.phases, &self.baseline)?;
        let power_factor = power_savings_factor(&self.phases, &self.baseline)?;
        let baseline_days = total_tokens(&self.phases) / self.baseline.tokens_per_day_b;
        Ok(SavingsReport {
            time_factor,
            power_factor,
            phases: self
                .phases
                .iter()
                .map(|p| PhaseCost {
                    name: p.name.clone(),
                    days: p.days(),
                    gflops_days: p.gflops_days(),
                })
                .collect(),
            baseline_days,
            baseline_gflops_days: baseline_days * self.baseline.cluster_gflops(),
        })
    }

    /// The three-phase 7B → 16B → 8×16B run and its 32B from-scratch baseline.
    pub fn reference_run() -> Self {
        let phase = |name: &str, devices, gflops, size, tokens, rate| PhaseSpec {
            name: name.into(),
            devices,
            gflops_per_device: gflops,
            model_size_b: size,
            trained_tokens_b: tokens,
            tokens_per_day_b: rate,
        };
        SavingsPlan {
            phases: vec![
                phase("preparation", 480, 989.5, 7.0, 3600.0, 279.0),
                phase("scale-up", 1024, 240.0, 16.0, 1200.0, 70.0),
                phase("scale-out", 1024, 240.0, 32.0, 545.0, 25.0),
            ],
            baseline: phase("from-scratch", 1024, 240.0, 32.0, 5345.0, 25.0),
        }
    }
}
