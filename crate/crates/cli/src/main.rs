use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use telerisk::pipeline::{cmd_cv, cmd_model, cmd_predict, cmd_report, cmd_synth, PipelineConfig};
use telerisk::Error;

#[derive(Parser)]
#[command(name = "telerisk", version, about = "Contextual telematics driver-risk pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the worker count (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population into the data directory.
    Synth(Common),
    /// Build deviation maps, cohort labels and classifiers.
    Model(Common),
    /// Score the held-out drivers with the stored models.
    Predict(Common),
    /// Summarize predicted cohorts against records.
    Report(Common),
    /// Cross-validate the refined classifier on the modeling set.
    Cv(Common),
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn load(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = load(&c)?;
            let manifest = cmd_synth(&cfg)?;
            say!(
                "wrote {} drivers to {}",
                manifest.drivers.len(),
                cfg.paths.data_dir.display()
            );
        }
        Command::Model(c) => {
            let cfg = load(&c)?;
            let art = cmd_model(&cfg)?;
            let labeled = art.cohorts.labeled();
            say!(
                "{} modeling drivers, {} labeled, {} trees; artifacts in {}",
                art.deviation_maps.len(),
                labeled.len(),
                art.model.ensemble.trees.len(),
                cfg.paths.model_dir().display()
            );
            for w in &art.warnings {
                info!("{w}");
            }
        }
        Command::Predict(c) => {
            let cfg = load(&c)?;
            let (refined, baseline) = cmd_predict(&cfg)?;
            say!(
                "{} refined and {} baseline predictions in {}",
                refined.len(),
                baseline.len(),
                cfg.paths.output_dir.display()
            );
        }
        Command::Report(c) => {
            let cfg = load(&c)?;
            let (refined, baseline) = cmd_report(&cfg)?;
            say!("refined classifier\n{}", refined.to_text());
            say!("baseline classifier\n{}", baseline.to_text());
        }
        Command::Cv(c) => {
            let cfg = load(&c)?;
            let cv = cmd_cv(&cfg)?;
            for (i, l) in cv.fold_log_loss.iter().enumerate() {
                say!("fold {i}: log-loss {l:.4}");
            }
            say!("mean log-loss {:.4}", cv.mean_log_loss);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
