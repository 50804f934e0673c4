use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use clipdet::error::Error;
use clipdet::harness::{self, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "clipdet", version, about = "Scene text detection with a prompted vision-language backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the `train` legs and evaluate the `eval` legs.
    Train(Common),
    /// Evaluate `checkpoint` on the `eval` legs.
    Evaluate(Common),
    /// Write prediction files for `input`.
    Predict(Common),
    /// Train once per `fewshot_ratios` entry.
    FewshotSweep(Common),
    /// Train on the source legs, report each target leg.
    Adapt(Common),
    /// Generate a synthetic dataset.
    GenToy(Common),
    /// Export embedding and score maps for `input`.
    ExportMaps(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Train(c) => ("train", c),
            Command::Evaluate(c) => ("evaluate", c),
            Command::Predict(c) => ("predict", c),
            Command::FewshotSweep(c) => ("fewshot-sweep", c),
            Command::Adapt(c) => ("adapt", c),
            Command::GenToy(c) => ("gen-toy", c),
            Command::ExportMaps(c) => ("export-maps", c),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn run(name: &str, cmd: &Command, cfg: &ExperimentConfig) -> Result<Value, Error> {
    let v = match cmd {
        Command::Train(_) => serde_json::to_value(harness::run_experiment(cfg)?)?,
        Command::Adapt(_) => serde_json::to_value(harness::adapt(cfg)?)?,
        Command::Evaluate(_) => serde_json::to_value(harness::evaluate(cfg)?)?,
        Command::Predict(_) => serde_json::to_value(harness::predict(cfg)?)?,
        Command::FewshotSweep(_) => serde_json::to_value(harness::fewshot_sweep(cfg)?)?,
        Command::GenToy(_) => serde_json::to_value(harness::gen_toy(cfg)?)?,
        Command::ExportMaps(_) => serde_json::to_value(harness::export_maps(cfg)?)?,
    };
    Ok(json!({ "status": "ok", "command": name, "result": v }))
}

/// Pretty JSON on stdout; a closed pipe is not an error.
fn emit(v: &Value) {
    let text = serde_json::to_string_pretty(v).expect("json value");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn fail(command: &str, kind: &str, message: String, code: u8) -> ExitCode {
    let manifest = json!({
        "status": "error",
        "command": command,
        "error": { "kind": kind, "message": message },
    });
    emit(&manifest);
    eprintln!("clipdet {command}: {message}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("", "usage", e.to_string(), 2),
    };
    let (name, common) = cli.command.parts();
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => return fail(name, e.kind(), e.to_string(), 2),
    };
    match run(name, &cli.command, &cfg) {
        Ok(v) => {
            emit(&v);
            ExitCode::SUCCESS
        }
        Err(e) => fail(name, e.kind(), e.to_string(), 1),
    }
}
