//! `gradleak`: synthesise datasets, run leakage scenarios and post-process reports.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gradleak_core::harness::{
    fmt_value, load_dataset, read_report, run_on_dataset, run_scenario_with, save_dataset, synth_dataset,
    DatasetConfig, LeakageReport, Metric, ReportFormat, RunOptions, ScenarioConfig, Status,
};
use gradleak_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "gradleak", version, about = "Layer-wise gradient leakage quantification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic attributed dataset in GLK1 format.
    Synth {
        /// Scenario config whose `[dataset]` table supplies the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Run a scenario and emit its leakage report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Run this single seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "GRADLEAK_JOBS", value_parser = clap::value_parser!(u64).range(1..))]
        jobs: Option<u64>,
        /// Use a saved GLK1 dataset instead of synthesising one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Fill `runtime_ms` with wall-clock times (output is then not reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Filter, summarise or convert an existing report.
    Report {
        /// CSV or JSON report.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        layer_set: Option<String>,
        /// Median over seeds for every remaining cell (CSV only).
        #[arg(long)]
        summary: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gradleak: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            config,
            out,
            seed,
            n,
            height,
            width,
        } => {
            let base = match config {
                Some(path) => ScenarioConfig::load(&path)?.dataset,
                None => DatasetConfig::default(),
            };
            let ds = synth_dataset(
                n.unwrap_or(base.n),
                height.unwrap_or(base.height),
                width.unwrap_or(base.width),
                seed.unwrap_or(base.seed),
            )
            .map_err(|e| Error::Config(e.to_string()))?;
            save_dataset(&ds, &out)
        }
        Command::Run {
            config,
            out,
            format,
            seed,
            jobs,
            dataset,
            timings,
        } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let options = RunOptions {
                jobs: jobs.map_or(0, |j| j as usize),
                timings,
            };
            let report = match dataset {
                Some(path) => run_on_dataset(&cfg, &load_dataset(&path)?, options)?,
                None => run_scenario_with(&cfg, options)?,
            };
            write_output(out.as_deref(), &report.render(format.into())?)
        }
        Command::Report {
            input,
            out,
            format,
            metric,
            layer_set,
            summary,
        } => {
            let report = read_report(&input)?;
            let rows = report
                .rows
                .into_iter()
                .filter(|r| metric.is_none_or(|m| r.metric == m))
                .filter(|r| layer_set.as_ref().is_none_or(|l| &r.layer_set == l))
                .collect();
            let filtered = LeakageReport::new(rows);
            let text = if summary {
                summarise(&filtered)
            } else {
                filtered.render(format.into())?
            };
            write_output(out.as_deref(), &text)
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn num(v: Option<f64>) -> String {
    v.map(fmt_value).unwrap_or_default()
}

/// Sweep values and thresholds are non-negative, so their bit patterns sort
/// numerically.
fn order_key(v: Option<f64>) -> Option<u64> {
    v.map(f64::to_bits)
}

/// Median value across seeds per (scenario, layer set, metric, sweep, tau).
fn summarise(report: &LeakageReport) -> String {
    type Key = (String, String, Metric, Option<u64>, Option<u64>);
    let mut cells: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for r in &report.rows {
        let key = (
            r.scenario.clone(),
            r.layer_set.clone(),
            r.metric,
            order_key(r.sweep_value),
            order_key(r.tau),
        );
        let cell = cells.entry(key).or_default();
        match (r.status, r.value) {
            (Status::Ok, Some(v)) => cell.0.push(v),
            _ => cell.1 += 1,
        }
    }
    let mut out = String::from("scenario,layer_set,metric,sweep_value,tau,median,seeds,diverged\n");
    for ((scenario, layers, metric, sweep, tau), (mut values, diverged)) in cells {
        values.sort_by(f64::total_cmp);
        let median = match values.len() {
            0 => None,
            n if n % 2 == 1 => Some(values[n / 2]),
            n => Some(0.5 * (values[n / 2 - 1] + values[n / 2])),
        };
        out.push_str(&format!(
            "{scenario},{layers},{metric},{},{},{},{},{diverged}\n",
            num(sweep.map(f64::from_bits)),
            num(tau.map(f64::from_bits)),
            num(median),
            values.len()
        ));
    }
    out
}
