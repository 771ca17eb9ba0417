use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cafm::autodiff::GradFault;
use cafm::config::{ExperimentConfig, SweepSpec, Task};
use cafm::error::{Error, Result};
use cafm::{experiment, gradcheck, rng};

#[derive(Parser)]
#[command(name = "cafm", version, about = "Constraint-aware flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Root seed; overrides `train.seed`.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides `experiment.out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Membership oracle command; overrides `experiment.oracle_cmd`.
    #[arg(long, value_name = "STR")]
    oracle_cmd: Option<String>,
    /// Evaluation worker threads. Results do not depend on it.
    #[arg(long, value_name = "N", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method and write checkpoints and loss curves.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate trained checkpoints with the mean flow.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint(s) to evaluate; `fm_re` takes theta1 then theta2.
        /// Defaults to the files `train` writes in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Vec<PathBuf>,
    },
    /// Train and evaluate every setting of a sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Comma-separated switch times.
        #[arg(long, value_delimiter = ',')]
        t0: Option<Vec<f64>>,
        /// Comma-separated randomized step counts.
        #[arg(long, value_delimiter = ',')]
        n2: Option<Vec<usize>>,
        /// Pair the axes element-wise instead of taking their product.
        #[arg(long)]
        paired: bool,
    },
    /// Check analytic gradients against finite differences and the
    /// policy-gradient estimator against a closed form.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Write target samples as CSV.
    DumpData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    SignFlip,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load_raw(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.experiment.out = out.clone();
    }
    if let Some(cmd) = &common.oracle_cmd {
        cfg.experiment.oracle_cmd = Some(cmd.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let dir = cfg.experiment.out.clone();
            let outcome = experiment::run_train(&cfg, &dir)?;
            for r in &outcome.reports {
                let (_, tail) = r.fm_loss_head_tail(10);
                eprintln!("{}: {} iterations, final fm_loss {tail:.4e}, {:.0} ms", r.stage, r.records.len(), r.wall_ms);
            }
            println!("{}", dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let dir = cfg.experiment.out.clone();
            let ckpts = if checkpoint.is_empty() {
                experiment::default_checkpoints(&cfg, &dir)
            } else {
                checkpoint
            };
            let m = experiment::run_eval(&cfg, &ckpts, &dir, common.workers)?;
            print!("{}", experiment::metrics_csv(&cfg, &m));
        }
        Command::Sweep {
            common,
            lambda,
            t0,
            n2,
            paired,
        } => {
            let mut cfg = load(&common)?;
            if lambda.is_some() || t0.is_some() || n2.is_some() {
                cfg.sweep = Some(SweepSpec { paired, lambda, t0, n2 });
            } else if paired {
                if let Some(s) = cfg.sweep.as_mut() {
                    s.paired = true;
                }
            }
            cfg.validate()?;
            let dir = cfg.experiment.out.clone();
            let total = cfg.sweep.as_ref().map(|s| s.settings()).transpose()?.map_or(0, |s| s.len());
            experiment::run_sweep(&cfg, &dir, common.workers, |k, _| {
                eprintln!("setting {}/{total} done", k + 1);
            })?;
            println!("{}", dir.join(experiment::SWEEP_CSV).display());
        }
        Command::Gradcheck { inject_fault } => {
            let fault = inject_fault.map(|Fault::SignFlip| GradFault::FlipGaussianLogPdfSign);
            let report = gradcheck::run(fault)?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradcheck failed: {}", report.failures().join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpData { task, n, seed, out } => {
            let task: Task = task.parse()?;
            let target = task.target(task)?;
            let x = target.sample(n, &mut rng::stream(seed, "dump", 0))?;
            let csv = experiment::data_csv(&x);
            match out {
                Some(path) => fs::write(&path, csv).map_err(|e| Error::io(&path, e))?,
                None => std::io::stdout()
                    .write_all(csv.as_bytes())
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
