use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mfnego::harness::{self, RunOptions};
use mfnego::{Algorithm, Error, SimConfig};

#[derive(Parser)]
#[command(name = "mfnego", version, about = "Mean-field bandwidth negotiation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv.
    Run {
        /// JSON config; defaults apply to omitted keys (and to everything if absent).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print progress every N iterations.
        #[arg(long)]
        progress: Option<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every *.json config in a directory and write summary.csv.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Mf,
    Idql,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
}

impl Overrides {
    fn apply(&self, cfg: &mut SimConfig) {
        if let Some(v) = self.devices {
            cfg.n_devices = v;
        }
        if let Some(v) = self.channels {
            cfg.n_channels = v;
        }
        if let Some(v) = self.neighbors {
            cfg.n_neighbors = v;
        }
        if let Some(v) = self.alpha {
            cfg.smoothing = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(a) = self.algo {
            cfg.algorithm = match a {
                AlgoArg::Mf => Algorithm::MeanField,
                AlgoArg::Idql => Algorithm::Idql,
            };
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::TrainingFault { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            progress,
            overrides,
        } => run(config, out, progress, &overrides),
        Command::Sweep {
            configs,
            out,
            jobs,
            overrides,
        } => sweep(configs, out, jobs, &overrides),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(config: Option<PathBuf>, out: PathBuf, progress: Option<usize>, overrides: &Overrides) -> mfnego::Result<u8> {
    let mut cfg = match config {
        Some(path) => {
            SimConfig::from_json_file(&path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let run = harness::run_experiment_with(
        &cfg,
        RunOptions {
            record_actions: false,
            progress_every: progress,
        },
    )?;
    harness::write_run_dir(&out, &run)?;
    if let Some(s) = run.summary {
        println!(
            "utilization {:.4}  infeasible {:.4}  variance {:.6}  mean request {:.4}",
            s.mean_utilization, s.infeasible_fraction, s.action_variance, s.mean_population_action
        );
    }
    Ok(0)
}

fn sweep(configs: PathBuf, out: PathBuf, jobs: usize, overrides: &Overrides) -> mfnego::Result<u8> {
    let mut entries = harness::load_config_dir(&configs)?;
    for e in &mut entries {
        overrides.apply(&mut e.config);
        e.config.validate()?;
    }
    let report = harness::sweep(&entries, &out, jobs)?;
    for o in &report.outcomes {
        match &o.result {
            Ok(run) => match run.summary {
                Some(s) => println!(
                    "{}: utilization {:.4}  variance {:.6}",
                    o.name, s.mean_utilization, s.action_variance
                ),
                None => println!("{}: ok", o.name),
            },
            Err(e) => eprintln!("{}: {e}", o.name),
        }
    }
    Ok(if report.faults() > 0 { 2 } else { 0 })
}
