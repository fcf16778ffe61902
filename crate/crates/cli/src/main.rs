use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rpo::algo::{EvalMode, TrainerKind};
use rpo::diagnostics::grad_check_suite;
use rpo::envs::EnvKind;
use rpo::experiment::{self, ExperimentConfig};
use rpo::oracle::{estimator_lab, LabConfig};

#[derive(Parser, Debug)]
#[command(name = "rpo", version, about = "Reparameterization proximal policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; omitted sections take trainer defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides logging.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trainer: Option<TrainerKind>,
    #[arg(long)]
    env: Option<EnvKind>,
    /// Dotted override, e.g. `trainer.policy_epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(t) = self.trainer {
            overrides.push(format!("trainer.kind=\"{}\"", t.as_str()));
        }
        if let Some(e) = self.env {
            overrides.push(format!("env.kind=\"{}\"", e.as_str()));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seeds=[{s}]"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("logging.out_dir={}", json!(o)));
        }
        overrides.extend(self.set.iter().cloned());
        ExperimentConfig::load(self.config.as_deref(), &overrides).context("resolving config")
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed, writing metrics, parameters and a summary per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Suppress per-iteration progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate parameters saved by `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate one mode only; both by default.
        #[arg(long)]
        mode: Option<EvalMode>,
    },
    /// Autodiff against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare gradient estimators against the quadrature truth.
    EstimatorLab {
        #[arg(long, default_value = "bandit")]
        env: EnvKind,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        perturbation: Option<f64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation set (full, no_kl, epochs_2, no_clip).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        quiet: bool,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, quiet } => {
            let cfg = common.resolve()?;
            let dir = cfg.logging.out_dir.clone();
            let summaries = experiment::train_all(&cfg, &dir, &mut |seed, m| {
                if !quiet {
                    eprintln!(
                        "seed {seed} iter {:>4} steps {:>8} return {:>10.3} kl {:.2e} clip {:.3} critic {:.4}",
                        m.iteration, m.env_steps, m.mean_return, m.kl_mean, m.clip_fraction, m.critic_loss
                    );
                }
            })?;
            for s in &summaries {
                println!(
                    "seed {}: deterministic {:.4} ± {:.4}, stochastic {:.4} ± {:.4} ({} episodes)",
                    s.seed,
                    s.deterministic.mean_return,
                    s.deterministic.std_return,
                    s.stochastic.mean_return,
                    s.stochastic.std_return,
                    s.deterministic.episodes
                );
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
        Command::Eval { common, mode } => {
            let cfg = common.resolve()?;
            let modes = match mode {
                Some(m) => vec![m],
                None => vec![EvalMode::Deterministic, EvalMode::Stochastic],
            };
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                for &m in &modes {
                    let r = experiment::evaluate_saved(&cfg, &cfg.logging.out_dir, seed, m)
                        .with_context(|| format!("evaluating seed {seed}"))?;
                    reports.push(json!({"seed": seed, "report": r}));
                }
            }
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(true)
        }
        Command::GradCheck { points, seed } => {
            let reports = grad_check_suite(points, seed);
            let mut ok = true;
            for r in &reports {
                ok &= r.passed;
                println!(
                    "{:<4} {:<40} max rel err {:.3e} over {} points",
                    if r.passed { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.points
                );
            }
            Ok(ok)
        }
        Command::EstimatorLab { env, samples, seed, perturbation, out } => {
            if !matches!(env, EnvKind::Bandit | EnvKind::Chain) {
                bail!("estimator-lab supports bandit and chain, not {}", env.as_str());
            }
            let mut lab = LabConfig {
                env,
                samples,
                seed,
                ..Default::default()
            };
            if let Some(p) = perturbation {
                lab.perturbation = p;
            }
            let report = estimator_lab(&lab)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                    for e in &report.estimators {
                        let worst = e.deviation_se.iter().fold(0.0f64, |a, d| a.max(d.abs()));
                        eprintln!("{:<30} max |deviation| {worst:.2} SE", e.name);
                    }
                }
                None => println!("{text}"),
            }
            Ok(true)
        }
        Command::Ablate { common, quiet } => {
            let cfg = common.resolve()?;
            let dir = cfg.logging.out_dir.clone();
            let variants = experiment::ablation_variants(&cfg)?;
            let full = variants[0].1.to_json();
            for (name, v) in &variants[1..] {
                let diff: Vec<String> = experiment::config_diff(&full, &v.to_json())
                    .into_iter()
                    .map(|(p, a, b)| format!("{p}: {a} -> {b}"))
                    .collect();
                eprintln!("{name}: {}", diff.join(", "));
            }
            let results = experiment::ablate(&cfg, &dir, &mut |name, seed, m| {
                if !quiet {
                    eprintln!(
                        "{name} seed {seed} iter {:>4} steps {:>8} return {:>10.3}",
                        m.iteration, m.env_steps, m.mean_return
                    );
                }
            })?;
            for (name, runs) in &results {
                let mean = runs.iter().map(|r| r.deterministic.mean_return).sum::<f64>() / runs.len() as f64;
                println!("{name:<9} deterministic return {mean:.4} over {} seeds", runs.len());
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
