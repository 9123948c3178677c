//! The `anl` command line: one subcommand per pipeline stage.
//!
//! Every subcommand writes `<out>/<command>.run.json` (see [`record`]) and
//! skips work whose record is complete and whose artifacts are unchanged.
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod record;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::commands::Command;
use crate::record::{Artifact, RunRecord, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Bad flags, missing required settings or malformed config files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "anl", version, about = "Attention-guided noise learning pipeline")]
pub struct Cli {
    /// TOML config file, or a previous run record to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Re-run even when a complete run record matches.
    #[arg(long, global = true)]
    pub force: bool,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// One pipeline stage. Fields are the resolved configuration.
pub trait Stage: Serialize + DeserializeOwned + Sized {
    const NAME: &'static str;
    fn out(&self) -> Option<&Path>;
    fn seed(&self) -> Option<u64> {
        None
    }
    fn run(&self, ctx: &mut RunContext) -> anyhow::Result<()>;
}

/// Artifacts and summary collected while a stage runs.
#[derive(Debug)]
pub struct RunContext {
    pub out: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub summary: Map<String, Value>,
}

impl RunContext {
    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.into(),
            serde_json::to_value(value).expect("summary value serializes"),
        );
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    init_logging(cli.verbose);
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match commands::dispatch(&cli, sub, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<anl::Error>().map(anl::Error::kind) {
        Some(anl::ErrorKind::Usage) => EXIT_USAGE,
        Some(anl::ErrorKind::Numerical) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Layers the config, checks the run record and runs the stage.
pub(crate) fn execute<S: Stage>(cli: &Cli, parsed: &S, matches: &ArgMatches, argv: &[String]) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => config::load_file(p, S::NAME)?,
        None => config::FileLayer::default(),
    };
    let stage: S = config::resolve(parsed, matches, &file)?;
    let out = stage
        .out()
        .ok_or_else(|| UsageError(format!("{} needs --out", S::NAME)))?
        .to_path_buf();
    let resolved = serde_json::to_value(&stage)?;
    std::fs::create_dir_all(&out).map_err(|e| anl::Error::io(&out, e))?;
    if !cli.force && RunRecord::load(&out, S::NAME).is_some_and(|r| r.satisfies(&resolved)) {
        log::info!(
            "{}: complete run record in {} matches; skipping",
            S::NAME,
            out.display()
        );
        println!("{} up to date ({})", S::NAME, RunRecord::path(&out, S::NAME).display());
        return Ok(());
    }

    let started = Instant::now();
    let mut record = RunRecord {
        tool: "anl".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: S::NAME.into(),
        argv: argv.to_vec(),
        config: resolved,
        seed: stage.seed(),
        deterministic: true,
        git_describe: record::git_describe(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_time_s: 0.0,
        status: Status::Running,
        artifacts: Vec::new(),
        summary: Value::Null,
        error: None,
    };
    record.write(&out).map_err(|e| anl::Error::io(&out, e))?;

    let mut ctx = RunContext {
        out: out.clone(),
        artifacts: Vec::new(),
        summary: Map::new(),
    };
    let result = stage.run(&mut ctx).and_then(|()| {
        ctx.artifacts
            .iter()
            .map(|p| Artifact::of(p).map_err(|e| anl::Error::io(p, e).into()))
            .collect::<anyhow::Result<Vec<_>>>()
    });
    record.wall_time_s = started.elapsed().as_secs_f64();
    record.summary = Value::Object(ctx.summary);
    let outcome = match result {
        Ok(artifacts) => {
            record.artifacts = artifacts;
            record.status = Status::Complete;
            Ok(())
        }
        Err(e) => {
            record.status = Status::Failed;
            record.error = Some(format!("{e:#}"));
            Err(e)
        }
    };
    record.write(&out).map_err(|e| anl::Error::io(&out, e))?;
    if outcome.is_ok() {
        log::info!("{} finished in {:.1} s", S::NAME, record.wall_time_s);
    }
    outcome
}
