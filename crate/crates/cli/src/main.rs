use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ergolab::manifest::{Kind, Manifest, MANIFEST_VERSION};
use ergolab::{execute, CliError, RunOptions, EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK};

#[derive(Parser)]
#[command(name = "ergolab", version, about = "Ergodic control experiments from TOML manifests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory, overriding the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for path-parallel stages.
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces the manifest seed; recorded in the run record.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Audit the model assumptions.
    Validate(Common),
    /// Forward simulation with path dumps and moment tables.
    Simulate(Common),
    /// Penalization ladder and constrained limit.
    Bsde(Common),
    /// Vanishing-discount extraction of the ergodic pair.
    ErgodicSweep(Common),
    /// Long-horizon slope of the finite-horizon value.
    LongTime(Common),
    /// Discounted value against the 1-D HJB oracle.
    OracleCompare(Common),
    /// Merge run records into plot tables and a summary.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run records, used when no manifest is given.
        records: Vec<PathBuf>,
    },
}

fn report_manifest(records: &[PathBuf], out: &std::path::Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let abs: Vec<PathBuf> = records
        .iter()
        .map(|p| std::fs::canonicalize(p).map_err(|e| CliError::io(p, e)))
        .collect::<Result<_, _>>()?;
    let m = Manifest {
        version: MANIFEST_VERSION,
        kind: Kind::Report,
        seed: 0,
        out: PathBuf::from("."),
        model: None,
        discretization: None,
        ladders: None,
        problem: None,
        tolerances: None,
        records: Some(abs),
    };
    let text = toml::to_string(&m).map_err(|e| CliError::Format(e.to_string()))?;
    let path = out.join("report_manifest.toml");
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let (kind, common, records) = match cli.command {
        Command::Validate(c) => (Kind::Validate, c, Vec::new()),
        Command::Simulate(c) => (Kind::Simulate, c, Vec::new()),
        Command::Bsde(c) => (Kind::Bsde, c, Vec::new()),
        Command::ErgodicSweep(c) => (Kind::ErgodicSweep, c, Vec::new()),
        Command::LongTime(c) => (Kind::LongTime, c, Vec::new()),
        Command::OracleCompare(c) => (Kind::OracleCompare, c, Vec::new()),
        Command::Report { common, records } => (Kind::Report, common, records),
    };
    let manifest = match (&common.manifest, kind) {
        (Some(p), _) => p.clone(),
        (None, Kind::Report) if !records.is_empty() => {
            let out = common.out.clone().ok_or_else(|| CliError::Manifest("report without a manifest needs --out".into()))?;
            report_manifest(&records, &out)?
        }
        _ => return Err(CliError::Manifest("--manifest is required".into())),
    };
    let opts = RunOptions {
        out: common.out,
        workers: common.workers,
        seed_override: common.seed_override,
        expected_kind: Some(kind),
    };
    let record = execute(&manifest, &opts)?;
    for c in &record.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if record.passed {
        Ok(EXIT_OK)
    } else {
        for c in record.failed_checks() {
            eprintln!("check failed: {}", c.name);
        }
        Ok(EXIT_CHECK_FAILED)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
