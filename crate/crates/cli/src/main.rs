use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ftlbench_core::config::RawConfig;
use ftlbench_core::report::{execute, latency_csv, RunOutput};
use ftlbench_core::sweep::{parse_axis, run_sweep, summary_csv};

#[derive(Parser)]
#[command(
    name = "ftlbench",
    version,
    about = "SSD flash translation layer simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation.
    Run(Common),
    /// Run one simulation per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...`
        #[arg(long)]
        axis: String,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(c: &Common) -> Result<RawConfig> {
    let text =
        fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let mut raw = RawConfig::parse(&text)?;
    if let Some(s) = c.seed {
        raw.set("seed", &s.to_string());
    }
    Ok(raw)
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("report.json"), out.report.to_json())?;
    fs::write(dir.join("latency.csv"), latency_csv(&out.latencies_ns))?;
    Ok(())
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("FTLBENCH_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n.min(avail),
        _ => avail,
    }
}

fn cell_dir(key: &str, value: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect::<String>()
    };
    format!("{}={}", clean(key), clean(value))
}

fn run(common: &Common) -> Result<()> {
    let cfg = load(common)?.build()?;
    let out = execute(&cfg)?;
    write_outputs(&common.out, &out)
}

/// Returns whether every cell completed.
fn sweep(common: &Common, axis: &str) -> Result<bool> {
    let raw = load(common)?;
    let (key, values) = parse_axis(axis)?;
    let cells = run_sweep(&raw, &key, &values, threads());
    fs::create_dir_all(&common.out)?;
    let mut ok = true;
    for (i, c) in cells.iter().enumerate() {
        let dir = common
            .out
            .join(format!("{i:02}_{}", cell_dir(&key, &c.value)));
        match &c.outcome {
            Ok(o) => write_outputs(&dir, o)?,
            Err(e) => {
                ok = false;
                eprintln!("cell {key}={}: {e}", c.value);
            }
        }
    }
    fs::write(common.out.join("summary.csv"), summary_csv(&key, &cells))?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c).map(|()| true),
        Command::Sweep { common, axis } => sweep(common, axis),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
