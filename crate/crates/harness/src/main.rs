use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvsg_harness::config::ExperimentConfig;
use cvsg_harness::experiment::{run_experiment, sweep, RunRecord, SweepGrid};
use cvsg_harness::report::{aggregate_text, aggregate_text_from_rows, emit_reports, parse_results};
use cvsg_harness::select::one_region_out_select;
use cvsg_harness::{HarnessError, Method};

#[derive(Parser)]
#[command(name = "cvsg", version, about = "Guided diffusion experiments on synthetic region x object worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the emitted tables and plot data.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration.
    Run(RunArgs),
    /// Run every point of the config's `sweep.*` grid.
    Sweep(RunArgs),
    /// Pick a configuration per region from a results table.
    Select {
        #[arg(long)]
        input: PathBuf,
        /// Also write the selection to `<out>/selection.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the aggregate table from a results table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, String), HarnessError> {
    let text = match &args.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::from_text(&text)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn finish(records: &[RunRecord], out: &Path) -> Result<(), HarnessError> {
    emit_reports(records, out)?;
    let refs: Vec<&RunRecord> = records.iter().collect();
    print!("{}", aggregate_text(&refs));
    let failed: usize = records.iter().map(|r| r.failures().count()).sum();
    if failed > 0 {
        return Err(HarnessError::Config(format!(
            "{failed} cell(s) failed; see {}",
            out.join("diagnostics.dat").display()
        )));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, _) = load(&args)?;
            let record = run_experiment(&cfg)?;
            finish(&[record], &args.out)
        }
        Command::Sweep(args) => {
            let (cfg, text) = load(&args)?;
            let grid = SweepGrid::from_text(&text)?;
            let mut records = Vec::new();
            let mut errors = Vec::new();
            for (i, r) in sweep(&cfg, &grid).into_iter().enumerate() {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(e) => errors.push(format!("point {i}: {e}")),
                }
            }
            finish(&records, &args.out)?;
            if errors.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::Config(errors.join("; ")))
            }
        }
        Command::Select { input, out } => {
            let rows = parse_results(&read(&input)?)?;
            let chosen = one_region_out_select(&rows)?;
            let text: String = chosen.iter().map(|(r, h)| format!("{r} {h}\n")).collect();
            print!("{text}");
            match out {
                Some(dir) => write(&dir.join("selection.txt"), &text),
                None => Ok(()),
            }
        }
        Command::Report { input, out } => {
            let rows = parse_results(&read(&input)?)?;
            let text = aggregate_text_from_rows(&rows);
            print!("{text}");
            match out {
                Some(dir) => write(&dir.join("aggregate.txt"), &text),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
