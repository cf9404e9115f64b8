use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use scaleup::checkpoint::{read_json, write_json};
use scaleup::corpus::{self, CorpusConfig};
use scaleup::growth::{self, GrowthPlan};
use scaleup::model::{self, DEFAULT_INIT_STD};
use scaleup::moe::{self, MoEConfig};
use scaleup::savings::SavingsPlan;
use scaleup::trainer::{self, TrainConfig};
use scaleup::{count_params, load_checkpoint, save_checkpoint, Error, ModelConfig};

#[derive(Parser)]
#[command(
    name = "scaleup",
    version,
    about = "Grow, upcycle, verify and train toy transformer checkpoints"
)]
struct Cli {
    /// Also write a machine-readable JSON summary here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random-initialise a dense checkpoint from a config file.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INIT_STD)]
        std: f64,
    },
    /// Apply a growth plan (width, then depth).
    Grow {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn every dense MLP into a mixture of identical experts.
    Upcycle {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        router_std: f64,
        #[arg(long, default_value_t = 0.001)]
        aux_coeff: f64,
        #[arg(long, default_value_t = 0.01)]
        z_coeff: f64,
        /// Use the raw top-k probabilities as gates.
        #[arg(long)]
        no_renormalize: bool,
    },
    /// Compare the logits of two checkpoints on random probe sequences.
    Verify {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Continue training a checkpoint on a token file.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Held-out token file; defaults to the last tenth of --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Mean next-token loss on a token file.
    Eval {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seq_len: Option<usize>,
    },
    /// Time and compute savings of a multi-phase training plan.
    Savings {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Print a checkpoint's config and parameter counts.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write a synthetic Markov-chain token file.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long, default_value_t = corpus::DEFAULT_SHARPNESS)]
        sharpness: f64,
    },
}

/// Successful run: text for stdout, JSON for `--report`, and whether a
/// check inside the command failed.
struct Outcome {
    summary: String,
    report: Value,
    failed: bool,
}

impl Outcome {
    fn ok(summary: String, report: Value) -> Self {
        Outcome {
            summary,
            report,
            failed: false,
        }
    }
}

const EXIT_INVALID: u8 = 1;
const EXIT_IO: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match run(cli.command) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    println!("{}", outcome.summary);
    if let Some(path) = &cli.report {
        if let Err(e) = write_json(path, &outcome.report) {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    }
    if outcome.failed {
        ExitCode::from(EXIT_INVALID)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cmd: Command) -> scaleup::Result<Outcome> {
    match cmd {
        Command::Init {
            config,
            seed,
            out,
            std,
        } => {
            let cfg: ModelConfig = read_json(&config)?;
            let ckpt = model::random_init_with::<f32>(&cfg, None, seed, std)?;
            save_checkpoint(&ckpt, &out)?;
            let pc = count_params(&ckpt);
            Ok(Outcome::ok(
                format!("wrote {} ({} parameters)", out.display(), pc.total),
                json!({ "out": out, "params": pc }),
            ))
        }
        Command::Grow { input, plan, out } => {
            let plan: GrowthPlan = read_json(&plan)?;
            let ckpt = load_checkpoint(&input)?;
            let grown = growth::scale_up(&ckpt, &plan)?;
            save_checkpoint(&grown, &out)?;
            let pc = count_params(&grown);
            Ok(Outcome::ok(
                format!(
                    "grew {} → {} layers, hidden {} → {}; wrote {} ({} parameters)",
                    plan.source_config.n_layers,
                    plan.target_config.n_layers,
                    plan.source_config.hidden_dim,
                    plan.target_config.hidden_dim,
                    out.display(),
                    pc.total
                ),
                json!({ "out": out, "plan": plan, "params": pc }),
            ))
        }
        Command::Upcycle {
            input,
            experts,
            top_k,
            seed,
            out,
            router_std,
            aux_coeff,
            z_coeff,
            no_renormalize,
        } => {
            let cfg = MoEConfig {
                n_experts: experts,
                top_k,
                aux_coeff,
                z_coeff,
                router_init_std: router_std,
                renormalize_gates: !no_renormalize,
            };
            let dense = load_checkpoint(&input)?;
            let sparse = moe::upcycle(&dense, &cfg, seed)?;
            save_checkpoint(&sparse, &out)?;
            let pc = count_params(&sparse);
            Ok(Outcome::ok(
                format!(
                    "upcycled to {experts} experts (top-{top_k}); total {} activated {}",
                    pc.total, pc.activated
                ),
                json!({ "out": out, "moe": cfg, "params": pc }),
            ))
        }
        Command::Verify {
            src,
            dst,
            probes,
            tol,
            seed,
        } => {
            let a = load_checkpoint(&src)?;
            let b = load_checkpoint(&dst)?;
            let rep = growth::verify_preservation(&a, &b, probes, seed, tol)?;
            Ok(Outcome {
                summary: format!(
                    "{} max_abs_logit_diff {:.3e} loss_diff {:.3e} (tol {:e}, {} probes)",
                    if rep.pass { "PASS" } else { "FAIL" },
                    rep.max_abs_logit_diff,
                    rep.loss_diff,
                    tol,
                    probes
                ),
                failed: !rep.pass,
                report: serde_json::to_value(&rep)?,
            })
        }
        Command::Train {
            input,
            data,
            config,
            out,
            log,
            eval_data,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let ckpt = load_checkpoint(&input)?;
            let tokens = corpus::read_tokens(&data)?;
            let (train_toks, held) = match &eval_data {
                Some(p) => (tokens, corpus::read_tokens(p)?),
                None => {
                    let cut = tokens.len() - tokens.len() / 10;
                    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
                }
            };
            let eval = (held.len() > cfg.seq_len).then_some(held.as_slice());
            let (trained, metrics) = trainer::train(&ckpt, &train_toks, eval, &cfg)?;
            save_checkpoint(&trained, &out)?;
            metrics.write_csv(&log)?;
            let last = metrics.rows.last().and_then(|r| r.train_loss);
            Ok(Outcome::ok(
                format!(
                    "trained {} steps; final train loss {}, eval loss {} → {}",
                    cfg.total_steps,
                    fmt_opt(last),
                    fmt_opt(metrics.initial_eval()),
                    fmt_opt(metrics.final_eval())
                ),
                json!({
                    "out": out,
                    "log": log,
                    "final_train_loss": last,
                    "initial_eval_loss": metrics.initial_eval(),
                    "final_eval_loss": metrics.final_eval(),
                }),
            ))
        }
        Command::Eval {
            input,
            data,
            seq_len,
        } => {
            let ckpt = load_checkpoint(&input)?;
            let tokens = corpus::read_tokens(&data)?;
            let seq_len = seq_len.unwrap_or(ckpt.config.context_length);
            let loss = model::eval_loss(&ckpt, &tokens, seq_len)?;
            Ok(Outcome::ok(
                format!("eval_loss {loss:.6}"),
                json!({ "eval_loss": loss, "seq_len": seq_len, "tokens": tokens.len() }),
            ))
        }
        Command::Savings { plan } => {
            let report = SavingsPlan::load(&plan)?.report()?;
            Ok(Outcome::ok(
                format!(
                    "time_factor {:.2}, power_factor {:.2}",
                    report.time_factor, report.power_factor
                ),
                serde_json::to_value(&report)?,
            ))
        }
        Command::Inspect { input } => {
            let ckpt = load_checkpoint(&input)?;
            let pc = count_params(&ckpt);
            let mut summary = serde_json::to_string_pretty(&ckpt.config)?;
            if let Some(m) = &ckpt.moe {
                summary.push('\n');
                summary.push_str(&serde_json::to_string_pretty(m)?);
            }
            summary.push_str(&format!(
                "\ntotal_params {}\nactivated_params {}",
                pc.total, pc.activated
            ));
            Ok(Outcome::ok(
                summary,
                json!({ "config": ckpt.config, "moe": ckpt.moe, "params": pc }),
            ))
        }
        Command::Synth {
            seed,
            vocab,
            tokens,
            out,
            order,
            sharpness,
        } => {
            let cfg = CorpusConfig {
                seed,
                vocab,
                n_tokens: tokens,
                order,
                sharpness,
            };
            let toks = corpus::generate(&cfg)?;
            corpus::write_tokens(&out, &toks)?;
            let h = corpus::unigram_entropy(&toks);
            Ok(Outcome::ok(
                format!(
                    "wrote {} tokens to {} (unigram entropy {h:.3} nats, ln V {:.3})",
                    toks.len(),
                    out.display(),
                    (vocab as f64).ln()
                ),
                json!({ "out": out, "corpus": cfg, "unigram_entropy": h }),
            ))
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}
