use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sitfuse::eval::DropMode;
use sitfuse_cli::commands::{self, EvalTarget};
use sitfuse_cli::gradcheck::{run_gradcheck, TOLERANCE};
use sitfuse_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "sitfuse", version, about = "Situational fusion navigation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test environment suite.
    Gen,
    /// Estimate the representation affinity matrix.
    Affinity,
    /// Train configured models (all when none are named).
    Train {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Evaluate models and baselines on the frozen test start set.
    Eval {
        #[arg(long = "model")]
        models: Vec<String>,
        #[arg(long, conflicts_with = "models")]
        checkpoint: Option<PathBuf>,
    },
    /// Success rate as representations are dropped.
    Robust {
        #[arg(long)]
        model: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one mode (renormalize or zero_noise).
        #[arg(long)]
        mode: Option<DropMode>,
    },
    /// Gate distribution by openness and per-branch extreme states.
    Analyze {
        #[arg(long)]
        model: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Comparison table from evaluation reports, in the given order.
    Table {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Finite-difference check of every scheme's loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 24)]
        cases: usize,
    },
    /// Every stage in order.
    Pipeline,
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    let mut cfg = ExperimentConfig::resolve(c.config.as_deref(), &c.sets, c.seed, c.out.as_deref())?;
    if let Some(n) = std::env::var("SITFUSE_THREADS").ok().filter(|v| !v.is_empty()) {
        let n: usize = n
            .parse()
            .map_err(|_| CliError::Usage(format!("SITFUSE_THREADS must be a positive integer, got `{n}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Gen => {
            let m = commands::cmd_gen(&cfg)?;
            println!("wrote {} train and {} test environments", m.train.len(), m.test.len());
        }
        Command::Affinity => {
            let a = commands::cmd_affinity(&cfg)?;
            println!(
                "affinity over {} representations from {} samples",
                a.matrix.len(),
                a.samples
            );
        }
        Command::Train { models } => {
            for name in commands::cmd_train(&cfg, &models)? {
                println!("trained {name}");
            }
        }
        Command::Eval { models, checkpoint } => {
            let target = match (checkpoint, models.is_empty()) {
                (Some(dir), _) => EvalTarget::Checkpoint(dir),
                (None, true) => EvalTarget::All,
                (None, false) => EvalTarget::Models(models),
            };
            for r in commands::cmd_eval(&cfg, target)? {
                println!("{:<28} {:6.1}%", r.model, r.average * 100.0);
            }
        }
        Command::Robust {
            model,
            checkpoint,
            mode,
        } => {
            if let Some(m) = mode {
                cfg.robustness.modes = vec![m];
            }
            let a = commands::cmd_robust(&cfg, &model, checkpoint.as_deref())?;
            for p in &a.points {
                println!("{:<12} k={:<3} {:6.1}%", p.mode.name(), p.k, p.rate * 100.0);
            }
        }
        Command::Analyze { model, checkpoint } => {
            let a = commands::cmd_analyze(&cfg, &model, checkpoint.as_deref())?;
            println!(
                "analyzed {} positions, gate cv {:.3}",
                a.band_counts.iter().sum::<usize>(),
                a.batch_cv
            );
        }
        Command::Table { models } => {
            print!("{}", commands::cmd_table(&cfg, &models)?.to_text());
        }
        Command::Gradcheck { cases } => {
            let results = run_gradcheck(cases, cfg.seed)?;
            let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            for r in &results {
                println!(
                    "{:>3} {:<15} lbl={:.3} aff={:.3} max_rel_err={:.3e}",
                    r.index,
                    r.scheme.name(),
                    r.lambda_lbl,
                    r.lambda_aff,
                    r.max_rel_err
                );
            }
            if worst >= TOLERANCE {
                return Err(CliError::Runtime(format!(
                    "gradient check failed: {worst:.3e} >= {TOLERANCE:e}"
                )));
            }
            println!("all {} cases below {TOLERANCE:e}", results.len());
        }
        Command::Pipeline => {
            print!("{}", commands::run_pipeline(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
