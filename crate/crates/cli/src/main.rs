mod cli;
mod commands;
mod config;

use std::collections::HashSet;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use voltcast_core::{Error, ErrorKind, Result};

use crate::cli::Cli;
use crate::commands::{Ctx, Given};
use crate::config::{threads_from_env, RunConfig, Verbosity};

fn explicit(m: &ArgMatches) -> impl Iterator<Item = String> + '_ {
    m.ids()
        .filter(|id| m.value_source(id.as_str()) == Some(ValueSource::CommandLine))
        .map(|id| id.as_str().to_string())
}

fn given(matches: &ArgMatches) -> Given {
    let mut ids: HashSet<String> = explicit(matches).collect();
    if let Some((_, sub)) = matches.subcommand() {
        ids.extend(explicit(sub));
    }
    Given(ids)
}

fn build(cli: &Cli, given: &Given) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if given.0.contains("seed") {
        cfg.seed = Some(cli.seed);
    }
    if given.0.contains("out") {
        cfg.out = cli.out.clone();
    }
    if cli.quiet {
        cfg.verbosity = Verbosity::Quiet;
    }
    cfg.resolve_seed();
    commands::apply_flags(&mut cfg, &cli.command, given);
    let threads = threads_from_env()?;
    cfg.threads(threads);
    Ok(Ctx { cfg, threads })
}

fn init_logging(v: Verbosity) {
    let level = match v {
        Verbosity::Quiet => "error",
        Verbosity::Normal => "warn",
        Verbosity::Verbose => "info",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = build(&cli, &given(&matches)).and_then(|ctx| {
        init_logging(ctx.cfg.verbosity);
        commands::run(&ctx, &cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
