use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use rml_lab::cli::{cmd_ablate, cmd_inject, cmd_train, cmd_verify, ExperimentConfig, Suite, VerifyConfig};
use rml_lab::Error;

#[derive(Parser)]
#[command(name = "rml-lab", version, about = "Regroup median loss experiments on noisy labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the noisy training split, the test split and the corruption mask.
    Inject(RunArgs),
    /// Train in the configured mode and write metrics, summary and checkpoints.
    Train(RunArgs),
    /// Run statistical checks; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Optional TOML overriding check parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to DIR/verify.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare full RML with its two ablations.
    Ablate(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides run.seed (and, for ablate, ablation.seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, u64, PathBuf), Error> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let seed = self.seed.unwrap_or(cfg.run.seed);
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, seed, out))
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).expect("report serializes"))
        .map_err(|e| Error::Io { path, source: e })
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Inject(args) => {
            let (cfg, seed, out) = args.load()?;
            print_json(&cmd_inject(&cfg, seed, &out)?);
        }
        Command::Train(args) => {
            let (cfg, seed, out) = args.load()?;
            print_json(&cmd_train(&cfg, seed, &out)?);
        }
        Command::Verify { suite, config, seed, out } => {
            let suite: Suite = suite.parse()?;
            let params = match config {
                Some(p) => VerifyConfig::load(p)?,
                None => VerifyConfig::default(),
            };
            let reports = cmd_verify(suite, &params, seed)?;
            print_json(&reports);
            if let Some(dir) = out {
                write_json(&dir, "verify.json", &reports)?;
            }
            return Ok(reports.iter().all(|r| r.pass));
        }
        Command::Ablate(args) => {
            let (cfg, seed, out) = args.load()?;
            let seeds = match (args.seed, &cfg.ablation) {
                (None, Some(a)) => a.seeds.clone(),
                _ => vec![seed],
            };
            print_json(&cmd_ablate(&cfg, &seeds, &out)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error serializes"));
            ExitCode::from(2)
        }
    }
}
