//! `offset-bf`: design robust beamformers, estimate outage and sweep the
//! power-outage trade-off from a JSON run configuration.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 infeasible design.
//! stdout carries only the path of the written report.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use offset_bf::montecarlo::{self, OutageEstimate, SweepPoint};
use offset_bf::pipeline::{self, Algorithm};
use offset_bf::{DesignReport, Error};

use config::{InputError, RunConfig};

#[derive(Parser)]
#[command(name = "offset-bf", version, about = "Offset-based robust MISO downlink beamforming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run configuration (or a report written by an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo error draws per realization.
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated algorithm ids.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Design beamformers for one scenario and write a JSON report plus CSV.
    Design(Common),
    /// Maximize the common offset under the power budget.
    Maxr(Common),
    /// Design, then estimate the outage probabilities empirically.
    Montecarlo(Common),
    /// Power-outage sweep over an offset grid; writes a CSV table.
    Sweep(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Parse,
    Config,
    Scenario,
    Design,
    Montecarlo,
    Sweep,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::Config => "config",
            Stage::Scenario => "scenario",
            Stage::Design => "design",
            Stage::Montecarlo => "montecarlo",
            Stage::Sweep => "sweep",
            Stage::Output => "output",
        })
    }
}

struct Failure {
    stage: Stage,
    infeasible: bool,
    message: String,
}

impl Failure {
    fn input(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, infeasible: false, message: message.to_string() }
    }

    fn infeasible(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, infeasible: true, message: message.to_string() }
    }

    fn from_input(stage: Stage, e: InputError) -> Self {
        match e {
            InputError::Parse(m) => Self::input(Stage::Parse, m),
            InputError::Invalid(m) => Self::input(stage, m),
            InputError::NoUsers => Self::infeasible(stage, e),
        }
    }

    fn from_core(stage: Stage, e: Error) -> Self {
        let infeasible = matches!(
            e,
            Error::InfeasibleLoading { .. } | Error::Convergence { .. } | Error::DegenerateGeometry(_) | Error::DegenerateChannels(_)
        );
        Self { stage, infeasible, message: e.to_string() }
    }

    fn exit_code(&self) -> u8 {
        if self.infeasible {
            2
        } else {
            1
        }
    }
}

#[derive(Serialize)]
struct Report<'a> {
    report_kind: &'static str,
    config: &'a RunConfig,
    algorithm: Algorithm,
    /// Scenario indices of the users that passed selection; report indices refer to these.
    selected_users: Vec<usize>,
    /// Unit-norm directions as `[re, im]` pairs per antenna.
    directions: Vec<Vec<[f64; 2]>>,
    design: &'a DesignReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outage: Option<OutageEstimate>,
}

#[derive(Serialize)]
struct SweepReport<'a> {
    report_kind: &'static str,
    config: &'a RunConfig,
    points: &'a [SweepPoint],
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(command: Command) -> Result<PathBuf, Failure> {
    match command {
        Command::Design(c) => single(Kind::Design, &c),
        Command::Maxr(c) => single(Kind::MaxR, &c),
        Command::Montecarlo(c) => single(Kind::Montecarlo, &c),
        Command::Sweep(c) => sweep(&c),
    }
}

fn resolve(common: &Common, single_algorithm: bool) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::from_input(Stage::Config, e))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    if let Some(ids) = &common.algorithms {
        let algs = ids
            .iter()
            .map(|s| s.parse::<Algorithm>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::input(Stage::Config, e))?;
        if single_algorithm {
            if algs.len() != 1 {
                return Err(Failure::input(Stage::Config, "this command runs exactly one algorithm"));
            }
            cfg.algorithm = algs[0];
        }
        cfg.algorithms = algs;
    }
    cfg.resolve().map_err(|m| Failure::input(Stage::Config, m))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Design,
    MaxR,
    Montecarlo,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Design => "design",
            Kind::MaxR => "maxr",
            Kind::Montecarlo => "montecarlo",
        }
    }
}

fn single(kind: Kind, common: &Common) -> Result<PathBuf, Failure> {
    let mut cfg = resolve(common, true)?;
    if kind == Kind::MaxR && !cfg.algorithm.is_budgeted() {
        cfg.algorithm = Algorithm::MaxR;
    }
    let (scenario, selected) = cfg.scenario().map_err(|e| Failure::from_input(Stage::Scenario, e))?;
    let design = pipeline::design(cfg.algorithm, &scenario, &cfg.params()).map_err(|e| Failure::from_core(Stage::Design, e))?;
    if design.report.served().is_empty() {
        return Err(Failure::infeasible(Stage::Design, "every user was rescheduled"));
    }
    let max_r = (kind == Kind::MaxR).then(|| {
        let served = design.report.served();
        if design.report.unbounded_offset {
            f64::INFINITY
        } else {
            design.report.offsets[served[0]]
        }
    });
    let outage = if kind == Kind::Montecarlo {
        Some(
            montecarlo::estimate_outage(&design.beamformers, &scenario, cfg.trials, cfg.seed)
                .map_err(|e| Failure::from_core(Stage::Montecarlo, e))?,
        )
    } else {
        None
    };
    let directions = design.beamformers.directions().iter().map(|u| u.iter().map(|z| [z.re, z.im]).collect()).collect();
    let report = Report {
        report_kind: kind.name(),
        config: &cfg,
        algorithm: cfg.algorithm,
        selected_users: selected,
        directions,
        design: &design.report,
        // JSON has no infinity; an unbounded offset is flagged in the design report.
        max_r: max_r.filter(|r| r.is_finite()),
        outage,
    };
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}_report.json", kind.name())));
    write_json(&path, &report)?;
    let mut csv = String::new();
    push_csv_line(&mut csv, &DesignReport::CSV_HEADER);
    for row in design.report.csv_rows() {
        push_csv_line(&mut csv, &row);
    }
    write_text(&path.with_extension("csv"), &csv)?;
    Ok(path)
}

fn sweep(common: &Common) -> Result<PathBuf, Failure> {
    let cfg = resolve(common, false)?;
    let sweep_cfg = cfg.sweep_config().map_err(|m| Failure::input(Stage::Config, m))?;
    let points = montecarlo::sweep(&sweep_cfg).map_err(|e| Failure::from_core(Stage::Sweep, e))?;
    let path = cfg.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    let mut csv = String::new();
    push_csv_line(&mut csv, &SweepPoint::CSV_HEADER);
    for p in &points {
        push_csv_line(&mut csv, &p.csv_row());
    }
    write_text(&path, &csv)?;
    write_json(&path.with_extension("json"), &SweepReport { report_kind: "sweep", config: &cfg, points: &points })?;
    Ok(path)
}

fn push_csv_line<S: AsRef<str>>(buf: &mut String, fields: &[S]) {
    let line: Vec<&str> = fields.iter().map(AsRef::as_ref).collect();
    buf.push_str(&line.join(","));
    buf.push('\n');
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(Stage::Output, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::input(Stage::Output, format!("cannot write {}: {e}", path.display())))
}
