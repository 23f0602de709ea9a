use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmrec_cli::{parse_config, run, Command};

#[derive(Parser)]
#[command(name = "mmrec", version, about = "Multi-modal sequential recommendation: data, training, transfer, evaluation")]
struct Cli {
    /// `key = value` config file
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic source and target datasets
    GenData(Overrides),
    /// Multi-objective pre-training on a dataset
    Pretrain(Overrides),
    /// Next-item fine-tuning from a checkpoint under a transfer mode
    Finetune(Overrides),
    /// Full-catalog ranking metrics on the valid or test split
    Evaluate(Overrides),
    /// Ranking metrics on sub-sequences ending in a cold item
    ColdEval(Overrides),
    /// Finite-difference check of every objective
    GradCheck(Overrides),
    /// Dataset summary table
    Stats(Overrides),
}

#[derive(clap::Args)]
struct Overrides {
    /// Config overrides
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (cmd, over) = match cli.command {
        Cmd::GenData(o) => (Command::GenData, o),
        Cmd::Pretrain(o) => (Command::Pretrain, o),
        Cmd::Finetune(o) => (Command::Finetune, o),
        Cmd::Evaluate(o) => (Command::Evaluate, o),
        Cmd::ColdEval(o) => (Command::ColdEval, o),
        Cmd::GradCheck(o) => (Command::GradCheck, o),
        Cmd::Stats(o) => (Command::Stats, o),
    };
    let env: BTreeMap<String, String> = std::env::vars().collect();
    let result = parse_config(cli.config.as_deref(), &env, &over.set).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.dump());
            return Ok(());
        }
        run(cmd, &cfg, &mut std::io::stdout())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmrec {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
