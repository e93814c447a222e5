use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use islab::experiment::{self, DataSource, Event, ExperimentConfig};
use islab::Error;

#[derive(Parser)]
#[command(
    name = "islab",
    version,
    about = "Input-skip latent binary Bayesian neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// First seed (overrides `base_seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Print a progress line every this many epochs; 0 silences it.
        #[arg(long, default_value_t = 10)]
        progress: usize,
    },
    /// Evaluate the trained models and write the results table.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo draws per prediction (overrides `eval_samples`).
        #[arg(long)]
        samples: Option<usize>,
        /// Model files in seed order; defaults to the ones `train` writes.
        #[arg(long, num_args = 1..)]
        model: Option<Vec<PathBuf>>,
    },
    /// Export the sparse model's active paths as DOT and JSON.
    Paths {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Config of the run, used for covariate names.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Local explanation of one input with credible intervals.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated covariate values on the network's input scale.
        #[arg(long, conflicts_with = "row", required_unless_present = "row")]
        x: Option<String>,
        /// Explain this row of the run's test set (needs --config).
        #[arg(long, requires = "config")]
        row: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the train and test CSVs of one run.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(
    path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> islab::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.base_seed = seed;
    }
    Ok(cfg)
}

fn covariate_names(config: Option<&Path>) -> islab::Result<Vec<String>> {
    match config {
        None => Ok(Vec::new()),
        Some(p) => {
            let cfg = ExperimentConfig::from_path(p)?;
            let run = DataSource::load(&cfg.dataset)?.run(cfg.base_seed)?;
            Ok(run.train.columns)
        }
    }
}

fn parse_row(text: &str) -> islab::Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("--x value {s:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> islab::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            progress,
        } => {
            let cfg = load_config(&config, out, seed)?;
            let epochs = cfg.train.epochs;
            let outcome = experiment::cmd_train(&cfg, |e| match e {
                Event::RunStarted { seed, n_train } => {
                    eprintln!("seed {seed}: training on {n_train} rows")
                }
                Event::Epoch { seed, record } => {
                    let done = record.epoch + 1;
                    if progress > 0 && (done % progress == 0 || done == epochs) {
                        eprintln!(
                            "seed {seed} epoch {done}/{epochs} loss {:.4} kl {:.2} {:.2}s",
                            record.loss, record.kl, record.seconds
                        );
                    }
                }
                Event::Saved { path } => eprintln!("wrote {}", path.display()),
            })?;
            for p in outcome.logs {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            config,
            out,
            seed,
            samples,
            model,
        } => {
            let mut cfg = load_config(&config, out, seed)?;
            if let Some(n) = samples {
                cfg.eval_samples = n;
                cfg.validate()?;
            }
            let outcome = experiment::cmd_eval(&cfg, model.as_deref())?;
            let aggregates = outcome
                .rows
                .iter()
                .filter(|r| r.seed == experiment::AGGREGATE_SEED);
            let n_included = aggregates
                .clone()
                .filter(|r| r.metric.starts_with("included_"))
                .count();
            // per-covariate rows only fit on screen for small inputs; the CSV has them all
            for r in aggregates.filter(|r| n_included <= 20 || !r.metric.starts_with("included_")) {
                println!("{:<8} {:<24} {}", r.variant, r.metric, r.value);
            }
            eprintln!("wrote {}", outcome.path.display());
        }
        Command::Paths { model, out, config } => {
            let names = covariate_names(config.as_deref())?;
            let p = experiment::cmd_paths(&model, &out, &names)?;
            println!("used_weights {}", p.used_weights);
            for f in [p.dot, p.json, p.maps] {
                eprintln!("wrote {}", f.display());
            }
        }
        Command::Explain {
            model,
            x,
            row,
            config,
            samples,
            seed,
            out,
        } => {
            let (values, names) = match (x, row) {
                (Some(text), _) => (parse_row(&text)?, covariate_names(config.as_deref())?),
                (None, Some(i)) => {
                    let cfg = ExperimentConfig::from_path(
                        config.as_deref().expect("clap requires --config"),
                    )?;
                    experiment::test_row(&cfg, cfg.base_seed, i)?
                }
                (None, None) => unreachable!("clap requires --x or --row"),
            };
            let report = experiment::cmd_explain(&model, &values, samples, seed, &names)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let stem = model
                .file_stem()
                .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
            let path = out.join(format!("{stem}_explain.json"));
            report.write_json(&path)?;
            println!("{}", path.display());
        }
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config, out, seed)?;
            let (train, test) = experiment::cmd_gen_data(&cfg, cfg.base_seed)?;
            println!("{}\n{}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
