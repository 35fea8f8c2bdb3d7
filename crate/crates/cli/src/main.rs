use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use dartsrenet_cli::commands;
use dartsrenet_cli::config::{Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "dartsrenet",
    version,
    about = "Differentiable RNN cell search for ReNet image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search a cell with the continuous relaxation and write its genotype.
    Search(RunArgs),
    /// Train a network with a discrete cell, a GRU or an LSTM.
    Train(RunArgs),
    /// Evaluate a trained run directory on its test split.
    Eval {
        /// Output directory of a `train` run.
        #[arg(long)]
        from: PathBuf,
        /// Override a setting of the frozen config, as `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Where to write eval.txt; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a cell as a Graphviz graph.
    ExportDot {
        /// Preset name (vanilla, sigmoid-weighting, dws) or genotype file.
        source: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient checks and oracle comparisons.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Cell: a preset name, a genotype file, gru, lstm or mixed.
    #[arg(long)]
    cell: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn split_pair(s: &str) -> anyhow::Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve(command: Command, args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::new(command);
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(cell) = &args.cell {
        cfg.set("cell", cell)?;
    }
    for s in &args.overrides {
        let (k, v) = split_pair(s)?;
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Cmd::Search(args) => {
            let cfg = resolve(Command::Search, &args)?;
            let s = commands::search(&cfg, &args.out)?;
            println!(
                "genotype written to {}:\n{}",
                args.out.join(commands::GENOTYPE_FILE).display(),
                s.genotype
            );
        }
        Cmd::Train(args) => {
            let cfg = resolve(Command::Train, &args)?;
            let s = commands::train(&cfg, &args.out)?;
            println!(
                "test accuracy {:.4} (best validation {:.4}) after {} epochs, {} parameters",
                s.test_accuracy, s.best_val_acc, s.epochs, s.parameters
            );
        }
        Cmd::Eval { from, overrides, out } => {
            let pairs = overrides
                .iter()
                .map(|s| split_pair(s))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let acc = commands::eval(&from, &pairs, out.as_deref().unwrap_or(&from))?;
            println!("test accuracy {acc:.4}");
        }
        Cmd::ExportDot { source, out } => {
            let dot = commands::export_dot(&source)?;
            match out {
                Some(path) => std::fs::write(&path, dot).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{dot}"),
            }
        }
        Cmd::Selftest => {
            let checks = commands::selftest()?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
