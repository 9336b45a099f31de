use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bumps_core::config::{Profile, RunConfig};
use bumps_core::meta::{CandidateScope, Preset, SampleRate};
use bumps_core::par::Exec;
use bumps_core::pipeline::{self, Run, OUTPUT_DIR_ENV};
use bumps_core::Error;

#[derive(Debug, Parser)]
#[command(name = "bumps", version, about = "Expert distillation and policy filtering on a contextual kick task")]
struct Cli {
    /// TOML run configuration; overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one expert per meta-training task (existing ones are kept).
    TrainExperts {
        /// Only these target distances, comma separated.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<f64>>,
    },
    /// Roll out every expert into the contextual dataset.
    BuildDataset,
    /// Behavior-clone the meta-policy.
    MetaTrain {
        /// Presets to train (default: all configured).
        #[arg(long, value_delimiter = ',')]
        preset: Option<Vec<String>>,
    },
    /// Select a context per meta-test task.
    Filter {
        /// Meta-policies forming the candidate pool, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "4x256")]
        preset: Vec<String>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SampleRate>,
        #[arg(long)]
        radius: Option<f64>,
        /// Draw candidates from the whole range instead of the radius.
        #[arg(long)]
        global: bool,
    },
    /// Sweep all trained models over the meta-test grid.
    Evaluate,
    /// Train the multi-task PPO baseline.
    Baseline,
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn parse_mode(s: &str) -> Result<SampleRate, String> {
    match s {
        "normal" => Ok(SampleRate::Normal),
        "high_rate" | "high-rate" => Ok(SampleRate::HighRate),
        _ => Err(format!("unknown mode {s:?} (expected normal or high_rate)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn presets(names: &[String]) -> Result<Vec<Preset>, Error> {
    names.iter().map(|n| n.parse()).collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(cli.profile.parse::<Profile>()?),
    };
    if let Command::PrintConfig = cli.command {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let exec = match cli.jobs {
        Some(0) => return Err(Error::Config("--jobs must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(e.to_string()))?;
            let _ = n;
            Exec::default()
        }
        None => Exec::default(),
    };
    let mut run = Run::open(config, cli.output_dir.as_deref(), exec)?;
    log::info!("run directory {}", run.root().display());
    match cli.command {
        Command::TrainExperts { tasks } => {
            let s = pipeline::train_experts(&mut run, tasks.as_deref())?;
            println!("trained {} experts, kept {}", s.trained.len(), s.skipped.len());
        }
        Command::BuildDataset => {
            let d = pipeline::build_dataset(&mut run)?;
            println!("dataset: {} records over {} tasks", d.len(), d.contexts().len());
        }
        Command::MetaTrain { preset } => {
            let list = match preset {
                Some(names) => presets(&names)?,
                None => run.config.meta.presets.clone(),
            };
            for p in list {
                let t = pipeline::train_meta(&mut run, p)?;
                println!("{p}: best loss {:.5} at epoch {}", t.best_loss(), t.best_epoch);
            }
        }
        Command::Filter {
            preset,
            mode,
            radius,
            global,
        } => {
            let presets = presets(&preset)?;
            let mut cfg = run.config.filter.clone();
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(r) = radius {
                cfg.radius = r;
            }
            if global {
                cfg.scope = CandidateScope::Global;
            }
            cfg.validate()?;
            let reports = pipeline::run_filter(&mut run, &presets, &cfg)?;
            println!("filtered {} tasks as {}", reports.len(), pipeline::filter_name(&presets, &cfg));
        }
        Command::Evaluate => {
            let e = pipeline::evaluate(&mut run)?;
            println!(
                "experts: accuracy {:.3}, mean error {:.3} m",
                e.experts.mean_accuracy(),
                e.experts.mean_error()
            );
            match &e.comparison {
                Some(c) => print!("{}", c.to_text()),
                None => {
                    for (name, s) in &e.sweeps {
                        println!("{name}: accuracy {:.3}, mean error {:.3} m", s.mean_accuracy(), s.mean_error());
                    }
                }
            }
        }
        Command::Baseline => {
            let runs = pipeline::run_baseline(&mut run)?;
            println!("trained {} baseline seeds", runs.len());
        }
        Command::PrintConfig => unreachable!(),
    }
    Ok(())
}
