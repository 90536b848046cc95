//! Command-line front end over `codesearch-core`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{flag_name, Layers, UsageError, ENV_CONFIG, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// The argument parser. Every config key is a global `--flag`.
pub fn command() -> Command {
    let mut cmd = Command::new("codesearch")
        .about("Train, evaluate and query a neural code search model")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help(format!("key=value config file (also ${ENV_CONFIG})")),
        )
        .subcommand(Command::new("ingest").about("Extract, filter and encode a JSONL corpus into data_dir"))
        .subcommand(Command::new("train").about("Train on data_dir and write checkpoint and loss_curve"))
        .subcommand(Command::new("eval").about("Rank every query of eval_dir (or data_dir) with checkpoint"))
        .subcommand(Command::new("ablate").about("Train and evaluate each of `variants` under one config"))
        .subcommand(
            Command::new("search")
                .about("Search data_dir with checkpoint; reads queries from stdin when none is given")
                .arg(Arg::new("query").num_args(0..).trailing_var_arg(true).help("Query text")),
        )
        .subcommand(Command::new("config").about("Print the resolved configuration with the source of each key"));
    for key in KEYS {
        let default = if key.default.is_empty() { "\"\"" } else { key.default };
        cmd = cmd.arg(
            Arg::new(key.name)
                .long(flag_name(key.name))
                .value_name("VALUE")
                .global(true)
                .action(ArgAction::Set)
                .help(format!("{} [default: {default}]", key.help)),
        );
    }
    cmd
}

/// Defaults, then the config file, then the environment, then flags.
pub fn layers(matches: &ArgMatches, env: &[(String, String)]) -> Result<Layers, UsageError> {
    let mut layers = Layers::default();
    let file = matches
        .get_one::<String>("config")
        .cloned()
        .or_else(|| env.iter().find(|(k, _)| k == ENV_CONFIG).map(|(_, v)| v.clone()));
    if let Some(path) = file {
        layers.apply_file(&PathBuf::from(path))?;
    }
    layers.apply_env(env.iter().cloned())?;
    for key in KEYS {
        if let Some(v) = matches.get_one::<String>(key.name) {
            layers.set(key.name, v, "command line")?;
        }
    }
    Ok(layers)
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// Runs one invocation and returns its exit code.
pub fn run<I, T>(args: I, env: &[(String, String)], input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = layers(&matches, env)
        .and_then(|l| Ok((l.resolve()?, l)))
        .map_err(anyhow::Error::from)
        .and_then(|(run, layers)| {
            if run.threads > 0 {
                // Only the first pool request in a process takes effect.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(run.threads).build_global();
            }
            match matches.subcommand() {
                Some(("ingest", _)) => commands::ingest(&run, out),
                Some(("train", _)) => commands::train_cmd(&run, out),
                Some(("eval", _)) => commands::eval_cmd(&run, out),
                Some(("ablate", _)) => commands::ablate(&run, out),
                Some(("search", sub)) => {
                    let words: Vec<String> = sub.get_many::<String>("query").into_iter().flatten().cloned().collect();
                    let query = (!words.is_empty()).then(|| words.join(" "));
                    commands::search(&run, query.as_deref(), input, out)
                }
                Some(("config", _)) => {
                    for (k, v) in run.to_pairs() {
                        writeln!(out, "{k}={v}  # {}", layers.source(k))?;
                    }
                    Ok(())
                }
                _ => unreachable!("subcommand is required"),
            }
        });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}
