use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use patchmoe_cli::commands;
use patchmoe_cli::config::{RunConfig, KEYS};

#[derive(Parser)]
#[command(name = "patchmoe", version, about = "Train and inspect PatchMoE time-series models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file of key=value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (same as --set out_dir=DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, loss curve and validation metrics.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast the test windows.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Impute masked points of the test windows.
    Impute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score test points for anomalies.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Classify the test instances.
    Classify {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dump the experts chosen for every token of one window.
    InspectRouting {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV whose last `lookback` rows form the window.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Linear CKA between layer representations of one window.
    Cka {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference check of the training-loss gradients.
    Gradcheck {
        /// forecast, impute, anomaly, classify or all.
        #[arg(long, default_value = "all")]
        task: String,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print every config key with its resolved value.
    Config {
        /// Also describe each key.
        #[arg(long)]
        describe: bool,
    },
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.set.clone();
    if let Some(dir) = &cli.out {
        o.push(format!("out_dir={}", dir.display()));
    }
    o
}

fn run(cli: Cli) -> Result<bool> {
    let ov = overrides(&cli);
    let file = cli.config.as_deref();
    if let Command::Gradcheck { task, corrupt } = &cli.command {
        let cfg = RunConfig::resolve_on(commands::gradcheck_base(), file, &ov)?;
        let tasks: Vec<&str> = match task.as_str() {
            "all" => vec!["forecast", "impute", "anomaly", "classify"],
            t => vec![t],
        };
        let out = commands::gradcheck_cmd(&cfg, &tasks, corrupt.as_deref())?;
        print!("{}", out.text);
        return Ok(out.passed);
    }
    let cfg = RunConfig::resolve(file, &ov)?;
    let msg = match &cli.command {
        Command::Train => commands::train_cmd(&cfg)?,
        Command::Eval { checkpoint } => commands::eval_cmd(&cfg, checkpoint.as_deref())?.to_json(),
        Command::Forecast { checkpoint } => commands::predict_cmd(&cfg, "forecast", checkpoint.as_deref())?,
        Command::Impute { checkpoint } => commands::predict_cmd(&cfg, "impute", checkpoint.as_deref())?,
        Command::Detect { checkpoint } => commands::predict_cmd(&cfg, "anomaly", checkpoint.as_deref())?,
        Command::Classify { checkpoint } => commands::predict_cmd(&cfg, "classify", checkpoint.as_deref())?,
        Command::InspectRouting { checkpoint, input } => commands::inspect_routing_cmd(&cfg, checkpoint.as_deref(), input.as_deref())?,
        Command::Cka { checkpoint, input } => commands::cka_cmd(&cfg, checkpoint.as_deref(), input.as_deref())?,
        Command::Config { describe } => {
            if *describe {
                KEYS.iter().map(|(k, _, d)| format!("{k}={}  # {d}\n", cfg.get(k))).collect()
            } else {
                cfg.echo()
            }
        }
        Command::Gradcheck { .. } => unreachable!(),
    };
    println!("{}", msg.trim_end());
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
