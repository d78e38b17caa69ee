use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use osc_qat::config::ExperimentConfig;
use osc_qat::quant::EstimatorKind;
use osc_qat::toylab::{self, ToyProblem};
use osc_qat::train;

#[derive(Parser)]
#[command(
    name = "osc-qat",
    version,
    about = "Weight oscillations in quantization-aware training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Frequency,
    Lr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Ste,
    Ewgs,
    Psg,
    Dsq,
}

impl Estimator {
    fn kind(self) -> EstimatorKind {
        use osc_qat::quant::{DEFAULT_DSQ_TEMPERATURE, DEFAULT_EWGS_DELTA, DEFAULT_PSG_EPSILON};
        match self {
            Estimator::Ste => EstimatorKind::Ste,
            Estimator::Ewgs => EstimatorKind::Ewgs {
                delta: DEFAULT_EWGS_DELTA,
            },
            Estimator::Psg => EstimatorKind::Psg {
                epsilon: DEFAULT_PSG_EPSILON,
            },
            Estimator::Dsq => EstimatorKind::Dsq {
                k: DEFAULT_DSQ_TEMPERATURE,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// 1D toy regression: estimator trajectories and the frequency and
    /// learning-rate sweeps.
    Toy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: Option<Sweep>,
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
        /// Dampening strength.
        #[arg(long)]
        dampen: Option<f64>,
    },
    /// Full-precision pretraining followed by quantization-aware training.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Re-estimates BN statistics of a checkpoint and reports KL drift.
    ReestimateBn {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Task loss of stochastic roundings of the oscillating weights.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Binary optimization of the oscillating weights by simulated annealing.
    Anneal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Oscillation and KL reports from a checkpoint and its metrics log.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the run's metrics log when it exists.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.output_dir.join(train::CHECKPOINT_FILE))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_toy(
    cfg: &ExperimentConfig,
    sweep: Option<Sweep>,
    estimator: Option<Estimator>,
    dampen: Option<f64>,
) -> Result<()> {
    let mut base = cfg.toy.unwrap_or_default();
    if let Some(e) = estimator {
        base.estimator = e.kind();
    }
    if let Some(l) = dampen {
        base.lambda = l;
    }
    base.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    match sweep {
        Some(Sweep::Frequency) => {
            let distances: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
            let points = toylab::frequency_sweep(&base, &distances)?;
            write(&dir.join("frequency_sweep.csv"), &toylab::frequency_sweep_csv(&points))?;
            let xs: Vec<f64> = points.iter().map(|p| p.d_over_s).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.frequency).collect();
            let (slope, intercept) = toylab::fit_line(&xs, &ys)?;
            print_json(&json!({ "points": points, "slope": slope, "intercept": intercept }))
        }
        Some(Sweep::Lr) => {
            let points = toylab::lr_sweep(&base, &[0.4, 0.2, 0.1, 0.05])?;
            write(&dir.join("lr_sweep.csv"), &toylab::lr_sweep_csv(&points))?;
            print_json(&json!({ "points": points }))
        }
        None => {
            let runs: Vec<(String, ToyProblem)> = if estimator.is_some() || dampen.is_some() {
                vec![("single".into(), base)]
            } else {
                [Estimator::Ste, Estimator::Ewgs, Estimator::Psg, Estimator::Dsq]
                    .into_iter()
                    .map(|e| {
                        let name = e
                            .to_possible_value()
                            .expect("no skipped variants")
                            .get_name()
                            .to_string();
                        (
                            name,
                            ToyProblem {
                                estimator: e.kind(),
                                ..base
                            },
                        )
                    })
                    .collect()
            };
            let mut summary = Vec::new();
            for (name, p) in runs {
                let traj = toylab::simulate_trajectory(&p)?;
                let file = if name == "single" {
                    "trajectory.csv".to_string()
                } else {
                    format!("trajectory_{name}.csv")
                };
                write(&dir.join(&file), &traj.to_csv())?;
                let burn = toylab::default_burn_in(p.steps);
                summary.push(json!({
                    "run": name,
                    "file": file,
                    "estimator": p.estimator,
                    "lambda": p.lambda,
                    "changes_final_20pct": traj.changes_in_tail(0.2),
                    "frequency": toylab::measure_frequency(&traj.ints, burn)?,
                    "final_latent": traj.latent.last(),
                }));
            }
            print_json(&summary)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toy {
            common,
            sweep,
            estimator,
            dampen,
        } => run_toy(&load_config(&common)?, sweep, estimator, dampen),
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            print_json(&train::run_train(&cfg)?)
        }
        Command::ReestimateBn { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (tr, _) = cfg.datasets()?;
            let mut model = train::load_checkpoint(&cfg, &tr, &checkpoint_path(&cfg, checkpoint))?;
            let report = train::reestimate(&mut model, &train::bn_batches(&cfg, &tr))?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            osc_qat::checkpoint::save(&cfg.output_dir.join("reestimated.oqat"), &model.state_tensors())?;
            train::save_json(&cfg.output_dir.join("reestimate_report.json"), &report)?;
            print_json(&report)
        }
        Command::Sample {
            common,
            checkpoint,
            trials,
        } => {
            let cfg = load_config(&common)?;
            let (tr, _) = cfg.datasets()?;
            let model = train::load_checkpoint(&cfg, &tr, &checkpoint_path(&cfg, checkpoint))?;
            let report = train::sample_report(&model, &train::loss_batches(&cfg, &tr), trials, cfg.seed)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            train::save_json(&cfg.output_dir.join("sample_report.json"), &report)?;
            print_json(&report)
        }
        Command::Anneal { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (tr, _) = cfg.datasets()?;
            let model = train::load_checkpoint(&cfg, &tr, &checkpoint_path(&cfg, checkpoint))?;
            let (report, annealed) = train::anneal_report(
                &model,
                &train::loss_batches(&cfg, &tr),
                cfg.post.proposals_per_weight,
                cfg.seed,
            )?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            osc_qat::checkpoint::save(&cfg.output_dir.join("annealed.oqat"), &annealed.state_tensors())?;
            train::save_json(&cfg.output_dir.join("anneal_report.json"), &report)?;
            print_json(&report)
        }
        Command::Analyze {
            common,
            checkpoint,
            metrics,
        } => {
            let cfg = load_config(&common)?;
            let (tr, _) = cfg.datasets()?;
            let model = train::load_checkpoint(&cfg, &tr, &checkpoint_path(&cfg, checkpoint))?;
            let metrics = metrics.or_else(|| {
                let p = cfg.output_dir.join(train::METRICS_FILE);
                p.exists().then_some(p)
            });
            let log = metrics.as_deref().map(train::read_metrics).transpose()?;
            let analysis = train::analyze(&model, &train::bn_batches(&cfg, &tr), log.as_deref())?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            train::save_json(&cfg.output_dir.join("analysis.json"), &analysis)?;
            print_json(&analysis)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("OSC_QAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| osc_qat::Error::Config(format!("OSC_QAT_THREADS must be a number, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .find_map(|e| e.downcast_ref::<osc_qat::Error>())
        .is_some_and(osc_qat::Error::is_config);
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
