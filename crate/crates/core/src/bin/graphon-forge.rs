use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graphon_core::error::Error;
use graphon_core::pipeline::{exit_code, run_pipeline, run_scaled, run_stage, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "graphon-forge", version, about = "Estimate a sparse graphon from a sampled graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Output directory (overrides the config and GRAPHON_FORGE_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample a graph from the model.
    Generate,
    /// Split edges and extract the non-backtracking spectrum.
    Spectrum,
    /// Count weighted stars and normalize them into moments.
    Moments,
    /// Fit the feature density.
    Fit,
    /// Sample features and assemble the estimate.
    Estimate,
    /// Compare the estimate with the model.
    Evaluate,
    /// Run every stage.
    Run,
    /// Run the scaled-graphon ladder.
    Scaled,
}

fn load(cli: &Cli) -> Result<PipelineConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.n {
        cfg.n = n;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.deterministic |= cli.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command, cfg: &PipelineConfig) -> Result<(), Error> {
    let stage = match command {
        Command::Generate => Stage::Generate,
        Command::Spectrum => Stage::Spectrum,
        Command::Moments => Stage::Moments,
        Command::Fit => Stage::Fit,
        Command::Estimate => Stage::Estimate,
        Command::Evaluate => Stage::Evaluate,
        Command::Run => {
            let run = run_pipeline(cfg)?;
            for w in &run.manifest.warnings {
                log::warn!("{w}");
            }
            println!(
                "status={} K={} delta2_upper={} out={}",
                run.manifest.status,
                run.manifest.k,
                run.manifest.delta2_upper.map_or("n/a".to_string(), |d| format!("{d:.6}")),
                run.context.out.display()
            );
            return Ok(());
        }
        Command::Scaled => {
            for row in run_scaled(cfg)?.rows {
                println!(
                    "h={} K={} delta2_upper={}",
                    row.h,
                    row.k,
                    row.delta2_upper.map_or("n/a".to_string(), |d| format!("{d:.6}"))
                );
            }
            return Ok(());
        }
    };
    run_stage(cfg, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?
            .install(|| execute(cli.command, &cfg)),
        None => execute(cli.command, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
