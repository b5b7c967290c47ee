//! `damsl` command-line front end: synthetic data generation, training,
//! evaluation and benchmark grids.

mod commands;
mod config;
mod error;

use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};

use config::{RunConfig, KEYS};
use error::{CliError, CliResult};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut keys: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name("VALUE")
                .help(k.help)
                .global(true)
        })
        .collect();
    keys.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("`key = value` settings file; flags take precedence")
            .global(true),
    );
    Command::new("damsl")
        .about("Score-space graph metric learning for cross-domain few-shot classification")
        .subcommand_required(true)
        .args_override_self(true)
        .args(keys)
        .subcommand(
            Command::new("gen-data")
                .args_override_self(true)
                .about("Write source, near, mid and far synthetic feature banks"),
        )
        .subcommand(
            Command::new("train")
                .args_override_self(true)
                .about("Pretrain and meta-train one variant; write checkpoint and loss log"),
        )
        .subcommand(
            Command::new("eval")
                .args_override_self(true)
                .about("Evaluate a checkpoint on a target bank; write one CSV row"),
        )
        .subcommand(
            Command::new("benchmark")
                .args_override_self(true)
                .about("Train and evaluate a variant × domain × shot grid"),
        )
}

fn run_config(matches: &ArgMatches) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for k in KEYS {
        if let Some(v) = matches.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn run(matches: &ArgMatches) -> CliResult<()> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = run_config(sub)?;
    eprint!("# {name} effective config\n{}", cfg.echo());
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "benchmark" => commands::benchmark(&cfg),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 3\nn_query = 10\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "damsl",
                "train",
                "--config",
                path.to_str().unwrap(),
                "--seed",
                "9",
            ])
            .unwrap();
        let cfg = run_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.count("n_query"), 10);
    }
}
