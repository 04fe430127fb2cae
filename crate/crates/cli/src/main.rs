mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stripelight::{Error, Result};

use config::RunConfig;
use manifest::{write_error, Run};

/// Adversarial light signals against rolling-shutter cameras.
#[derive(Debug, Parser)]
#[command(name = "stripelight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// External classifier command speaking the JSON-lines bridge protocol.
    #[arg(long, global = true)]
    bridge_cmd: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Scale a base image into an ambient / fully-lit scene pair.
    SynthScene,
    /// Train the reference CNN on the procedural shapes dataset.
    TrainClassifier,
    /// Optimize a light signal towards `attack.target_class`.
    Attack,
    /// Rank easily reachable target classes for the scene.
    Affinity,
    /// Measure success over transforms and every offset.
    Eval,
    SweepExposure,
    SweepAmbient,
    /// Optimize one signal per ambient level and exposure.
    Bank,
    /// Pick the bank signal for an ambient level and exposure.
    Select,
    /// Compile a signal into a PWM schedule and firmware header.
    CompilePwm,
    #[command(hide = true)]
    BridgeServe,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthScene => "synth-scene",
            Command::TrainClassifier => "train-classifier",
            Command::Attack => "attack",
            Command::Affinity => "affinity",
            Command::Eval => "eval",
            Command::SweepExposure => "sweep-exposure",
            Command::SweepAmbient => "sweep-ambient",
            Command::Bank => "bank",
            Command::Select => "select",
            Command::CompilePwm => "compile-pwm",
            Command::BridgeServe => "bridge-serve",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if let Some(cmd) = &cli.bridge_cmd {
        config.classifier.bridge_cmd = Some(cmd.clone());
    }
    config.validate()?;
    Ok(config)
}

fn execute(command: Command, run: &mut Run) -> Result<()> {
    match command {
        Command::SynthScene => commands::synth_scene(run),
        Command::TrainClassifier => commands::train_classifier(run),
        Command::Attack => commands::attack(run),
        Command::Affinity => commands::affinity(run),
        Command::Eval => commands::eval(run),
        Command::SweepExposure => commands::sweep_exposure(run),
        Command::SweepAmbient => commands::sweep_ambient(run),
        Command::Bank => commands::bank(run),
        Command::Select => commands::select(run),
        Command::CompilePwm => commands::compile_pwm(run),
        Command::BridgeServe => commands::bridge_serve(run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("stripelight {name}: {e}");
            let out = cli.out.clone().unwrap_or_else(|| RunConfig::default().out);
            write_error(&out, name, &e);
            return ExitCode::from(2);
        }
    };
    if config.workers > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.workers).build_global();
    }
    let mut run = Run::new(config, name);
    if matches!(cli.command, Command::BridgeServe) {
        return match execute(cli.command, &mut run) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("stripelight {name}: {e}");
                ExitCode::FAILURE
            }
        };
    }
    let result = std::fs::create_dir_all(run.out_dir())
        .map_err(|source| Error::File {
            path: run.out_dir().to_path_buf(),
            source,
        })
        .and_then(|()| execute(cli.command, &mut run));
    match result.and_then(|()| run.finish("ok")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stripelight {name}: {e}");
            write_error(run.out_dir(), name, &e);
            let _ = run.finish("error");
            ExitCode::FAILURE
        }
    }
}
