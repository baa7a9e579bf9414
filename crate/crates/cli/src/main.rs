use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_tta::harness::{parse_config, run_stage, ExperimentConfig, Stage, StageOutput, Workspace};
use latent_tta::runtime::Method;
use latent_tta::Error;

/// Latent-space test-time adaptation experiments.
#[derive(Parser, Debug)]
#[command(name = "ltta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
    /// darda, bn, entropy or none; overrides the config for run-stream.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate or load the clean image splits.
    GenData,
    /// Train the shared backbone on clean data.
    TrainBackbone,
    /// Fine-tune one sub-network per seen corruption.
    TrainSubnets,
    /// Train the corruption extractor and encoder; compute centroids.
    TrainEncoders,
    /// Fingerprint the sub-networks and train the signature encoder.
    TrainSignet,
    /// Run one method over the test stream and write its metrics CSV.
    RunStream,
    /// Summarize every metrics CSV in the artifact directory.
    Report,
}

impl Command {
    fn stage(self) -> Stage {
        match self {
            Command::GenData => Stage::GenData,
            Command::TrainBackbone => Stage::TrainBackbone,
            Command::TrainSubnets => Stage::TrainSubnets,
            Command::TrainEncoders => Stage::TrainEncoders,
            Command::TrainSignet => Stage::TrainSignet,
            Command::RunStream => Stage::RunStream,
            Command::Report => Stage::Report,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_name(s).ok_or_else(|| format!("unknown method {s:?}; expected darda, bn, entropy or none"))
}

/// 1 for problems the user can fix (inputs, config, missing stages), 2 for
/// failures inside the computation.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::MissingArtifact { .. }
        | Error::Io { .. }
        | Error::CorruptData(_)
        | Error::Unsupported(_)
        | Error::NotFound(_)
        | Error::GuardViolation(_) => 1,
        _ => 2,
    }
}

fn describe(stage: Stage, out: &StageOutput) -> String {
    match out {
        StageOutput::Data { train, test } => format!("{}: {train} training and {test} test images", stage.name()),
        StageOutput::Losses(l) => match (l.first(), l.last()) {
            (Some(a), Some(b)) => format!("{}: {} epochs, loss {a:.4} -> {b:.4}", stage.name(), l.len()),
            _ => format!("{}: done", stage.name()),
        },
        StageOutput::Subnets(n) => format!("{}: {n} sub-networks", stage.name()),
        StageOutput::Metrics { method, batches, accuracy } => {
            format!("{}: {} over {batches} batches, accuracy {:.2}%", stage.name(), method.name(), 100.0 * accuracy)
        }
        StageOutput::Report { table, .. } => table.clone(),
    }
}

fn run(cli: &Cli) -> Result<String, Error> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    let stage = cli.command.stage();
    let ws = Workspace::new(&cli.out);
    let out = run_stage::<f32>(stage, &cfg, &ws, cli.method)?;
    Ok(describe(stage, &out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
