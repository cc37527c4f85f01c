//! Command-line front end for the contact map enhancement pipeline.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "hicssm",
    version,
    about = "Hi-C contact map enhancement with a selective-scan UNet"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key=value` file, or `default` for the built-in defaults.
    #[arg(long)]
    config: Option<String>,
    /// Override a single key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic contact map.
    Synth(commands::SynthArgs),
    /// Balance, downsample, normalize and cut a map into paired patches.
    Preprocess(commands::PreprocessArgs),
    /// Train a model on preprocessed patch archives.
    Train(commands::TrainArgs),
    /// Enhance a low-coverage map with a trained model.
    Enhance(commands::EnhanceArgs),
    /// Compare a predicted map with a target map.
    Evaluate(commands::EvaluateArgs),
    /// Report the analytic forward-pass cost of a model configuration.
    Flops(commands::FlopsArgs),
    /// Compute the effective receptive field of a model.
    Erf(commands::ErfArgs),
    /// Compute the loop weighted score table.
    Loopscore(commands::LoopscoreArgs),
}

impl Command {
    fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::Synth(a) => &a.common,
            Command::Preprocess(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Enhance(a) => &a.common,
            Command::Evaluate(a) => &a.common,
            Command::Flops(a) => &a.common,
            Command::Erf(a) => &a.common,
            Command::Loopscore(a) => &a.common,
        }
    }

    /// Command flags that stand for configuration keys.
    fn flag_overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::Synth(a) => a.overrides(),
            Command::Preprocess(a) => a.overrides(),
            Command::Train(a) => a.overrides(),
            Command::Erf(a) => a.overrides(),
            Command::Evaluate(a) => a.overrides(),
            Command::Flops(a) => a.overrides(),
            Command::Enhance(_) | Command::Loopscore(_) => Vec::new(),
        }
    }
}

fn build_config(cmd: &Command) -> anyhow::Result<RunConfig> {
    let args = cmd.config_args();
    let mut cfg = RunConfig::default();
    if let Some(src) = &args.config {
        cfg.merge_source(src)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    for (k, v) in cmd.flag_overrides() {
        cfg.set(k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// 1 for numeric failures of the computation, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hicssm::Error>() {
            return match e {
                hicssm::Error::NonFinite(_) | hicssm::Error::Convergence { .. } | hicssm::Error::Undefined(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build_config(&cli.command).and_then(|cfg| {
        if cli.command.config_args().dump_config {
            print!("{}", cfg.render());
            return Ok(());
        }
        match &cli.command {
            Command::Synth(a) => commands::synth(a, &cfg),
            Command::Preprocess(a) => commands::preprocess(a, &cfg),
            Command::Train(a) => commands::train(a, &cfg),
            Command::Enhance(a) => commands::enhance(a, &cfg),
            Command::Evaluate(a) => commands::evaluate(a, &cfg),
            Command::Flops(a) => commands::flops(a, &cfg),
            Command::Erf(a) => commands::erf(a, &cfg),
            Command::Loopscore(a) => commands::loopscore(a, &cfg),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
