use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};

use tagdet_cli::config::RunConfig;
use tagdet_cli::{ablate, commands, exit_code};

fn subcommand(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("TOML run configuration (flat dotted keys)"),
        )
        .arg(
            Arg::new("overrides")
                .value_name("KEY=VALUE")
                .num_args(0..)
                .allow_hyphen_values(true)
                .trailing_var_arg(true)
                .action(ArgAction::Append)
                .help("Config overrides, e.g. --train.lr=1e-4 or model.dim=32"),
        )
}

fn cli() -> Command {
    Command::new("tagdet")
        .about("Temporal action detection on feature sequences: gated dual-scale temporal layers with boundary cross-attention")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands([
            subcommand("synth", "Generate a synthetic dataset"),
            subcommand("train", "Train a detector"),
            subcommand("eval", "Evaluate a checkpoint (or a predictions file) with mAP@IoU"),
            subcommand("infer", "Run detection over a split and dump predictions JSON"),
            subcommand("ablate", "Train and evaluate the fusion/context ablation matrix"),
        ])
}

fn main() -> ExitCode {
    env_logger::init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let config_path = sub.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<String> = sub
        .get_many::<String>("overrides")
        .map(|vals| vals.cloned().collect())
        .unwrap_or_default();
    let cfg = match RunConfig::from_sources(config_path.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    let outcome = match name {
        "synth" => commands::cmd_synth(&cfg),
        "train" => commands::cmd_train(&cfg),
        "eval" => commands::cmd_eval(&cfg).map(|_| ()),
        "infer" => commands::cmd_infer(&cfg).map(|_| ()),
        "ablate" => ablate::cmd_ablate(&cfg).map(|_| ()),
        _ => unreachable!("subcommand_required"),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
