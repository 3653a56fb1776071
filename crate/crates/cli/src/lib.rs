//! Command-line front end: single runs, parameter sweeps, reports on run
//! directories, sensitivity dumps and reference scenario bundles.
//!
//! Every artifact is written with serde_json's shortest round-trip float
//! formatting, so a run is byte-reproducible from its manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tdvvc::comms::write_trace_jsonl;
use tdvvc::coordinator::{
    decomposition_gap, run_baseline, run_configured, run_horizon, write_records_jsonl, IntervalRecord, MetricsSummary,
    RunOutput,
};
use tdvvc::dms::compute_vlsm;
use tdvvc::model::{snapshot_at, ControlVector, GridModel};
use tdvvc::network::full_network;
use tdvvc::powerflow::{solve_meshed, SolverOptions};
use tdvvc::scenario::{load_scenario, write_scenario, SimConfig};

pub const INTERVALS_FILE: &str = "intervals.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Environment variable holding the default output root.
pub const OUT_ENV: &str = "TDVVC_OUT";

#[derive(Debug, Parser)]
#[command(name = "tdvvc", version, about = "Coordinated T&D volt-var control co-simulation")]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop (or baseline) simulation.
    Run(RunArgs),
    /// Run once per value of one parameter and tabulate the results.
    Sweep(SweepArgs),
    /// Print a per-interval table for a run directory.
    Report {
        /// Directory written by `run`.
        dir: PathBuf,
    },
    /// Write a feeder's voltage sensitivity matrix as CSV.
    Vlsm(VlsmArgs),
    /// Write reference scenario bundles.
    Bundle {
        /// One reference scenario; all when omitted.
        name: Option<String>,
        /// Parent directory; one subdirectory per scenario.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario bundle directory or reference scenario name.
    #[arg(long, required_unless_present = "manifest")]
    pub scenario: Option<String>,
    /// Re-run from a manifest written by an earlier run.
    #[arg(long, conflicts_with = "scenario")]
    pub manifest: Option<PathBuf>,
    /// Random seed; defaults to the scenario's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Configuration override as a dotted key, e.g. `budget.ems_solve_s=400`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Keep the initial setpoints throughout.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    LatencyScale,
    #[value(name = "interval_s")]
    #[serde(rename = "interval_s")]
    IntervalS,
    DerCount,
    #[value(name = "loss_prob")]
    #[serde(rename = "loss_prob")]
    LossProb,
    Groups,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LatencyScale => "latency-scale",
            SweepAxis::IntervalS => "interval_s",
            SweepAxis::DerCount => "der-count",
            SweepAxis::LossProb => "loss_prob",
            SweepAxis::Groups => "groups",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct VlsmArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub feeder: String,
    #[arg(long, default_value_t = 0)]
    pub interval: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    /// `key=value` configuration overrides, applied in order.
    #[serde(default)]
    pub overrides: Vec<String>,
    pub output: PathBuf,
    #[serde(default)]
    pub baseline: bool,
    /// SHA-256 of each artifact, by file name.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn from_args(args: &ScenarioArgs, baseline: bool) -> Result<Self> {
        if let Some(path) = &args.manifest {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut m: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            m.artifacts.clear();
            if let Some(seed) = args.seed {
                m.seed = seed;
            }
            m.overrides.extend(args.set.iter().cloned());
            m.output = args.out.clone();
            m.baseline |= baseline;
            return Ok(m);
        }
        let scenario = args.scenario.clone().ok_or_else(|| anyhow!("--scenario or --manifest is required"))?;
        let seed = match args.seed {
            Some(s) => s,
            None => load_named(&scenario)?.1.seed,
        };
        Ok(Self { scenario, seed, overrides: args.set.clone(), output: args.out.clone(), baseline, artifacts: BTreeMap::new() })
    }
}

/// Loads a bundle directory, falling back to a reference scenario name.
pub fn load_named(spec: &str) -> Result<(GridModel, SimConfig)> {
    let path = Path::new(spec);
    if path.is_dir() {
        return load_scenario(path).map_err(|e| anyhow!("scenario {}: {e}", path.display()));
    }
    tdvvc::reference::by_name(spec).ok_or_else(|| {
        anyhow!(
            "no scenario directory or reference scenario named {spec:?} (references: {})",
            tdvvc::reference::NAMES.join(", ")
        )
    })
}

/// Short aliases accepted by `--set`.
fn canonical_key(key: &str) -> &str {
    match key {
        "interval_s" => "budget.interval_s",
        "latency_scale" | "latency-scale" => "latency.scale",
        "loss_prob" => "latency.loss_prob",
        other => other,
    }
}

/// Applies `key=value` overrides to a configuration.
pub fn apply_overrides(config: &mut SimConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
        config.apply_override(canonical_key(k.trim()), v.trim()).map_err(|e| anyhow!("{e}"))?;
    }
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Keeps the first `n` DERs of every feeder.
pub fn truncate_ders(grid: &mut GridModel, n: usize) {
    for f in &mut grid.feeders {
        f.ders.truncate(n);
        f.pv_series.truncate(n);
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Per-interval CSV: timing, slack, outcome and network metrics.
pub fn write_metrics_csv<W: Write>(w: W, records: &[IntervalRecord], interval_s: f64) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "interval",
        "start",
        "x_elapsed_s",
        "slack_s",
        "deadline_met",
        "carried_over",
        "violations",
        "losses",
        "retransmissions",
    ])?;
    for r in records {
        csv.write_record([
            r.interval.to_string(),
            r.start.to_string(),
            r.x_elapsed_s.to_string(),
            (interval_s - r.x_elapsed_s).to_string(),
            r.deadline_met.to_string(),
            r.carried_over.to_string(),
            r.violations.to_string(),
            r.losses.to_string(),
            r.retransmissions.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Outcome of one run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub output: RunOutput,
}

/// Resolves a manifest into the grid and configuration it runs.
pub fn prepare(manifest: &RunManifest) -> Result<(GridModel, SimConfig)> {
    let (grid, mut config) = load_named(&manifest.scenario)?;
    config.seed = manifest.seed;
    apply_overrides(&mut config, &manifest.overrides)?;
    Ok((grid, config))
}

/// Runs the simulation a manifest describes and writes its artifacts.
pub fn cmd_run(manifest: &RunManifest) -> Result<RunResult> {
    let (grid, config) = prepare(manifest)?;
    execute(manifest, &grid, &config)
}

fn execute(manifest: &RunManifest, grid: &GridModel, config: &SimConfig) -> Result<RunResult> {
    let output = if manifest.baseline { run_baseline(grid, config) } else { run_configured(grid, config) }
        .map_err(|e| anyhow!("{e}"))?;
    let dir = &manifest.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut w = create(&dir.join(INTERVALS_FILE))?;
    write_records_jsonl(&mut w, &output.records)?;
    w.flush()?;
    let mut w = create(&dir.join(TRACE_FILE))?;
    write_trace_jsonl(&mut w, &output.trace)?;
    w.flush()?;
    let mut w = create(&dir.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut w, &output.summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = create(&dir.join(METRICS_FILE))?;
    write_metrics_csv(&mut w, &output.records, config.budget.interval_s)?;
    w.flush()?;

    let mut manifest = manifest.clone();
    manifest.artifacts.clear();
    for name in [INTERVALS_FILE, SUMMARY_FILE, TRACE_FILE, METRICS_FILE] {
        manifest.artifacts.insert(name.to_owned(), sha256_file(&dir.join(name))?);
    }
    let mut w = create(&dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(RunResult { manifest, output })
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub mean_x: f64,
    pub deadline_miss_rate: f64,
    pub total_losses: f64,
    pub violation_intervals: usize,
}

impl SweepRow {
    fn new(value: &str, s: &MetricsSummary) -> Self {
        Self {
            value: value.to_owned(),
            mean_x: s.mean_x_s,
            deadline_miss_rate: s.deadline_miss_rate,
            total_losses: s.total_losses,
            violation_intervals: s.violation_intervals,
        }
    }
}

/// Runs `base` once per value of `axis`, each in its own subdirectory of
/// `base.output`, and writes the sweep table there.
pub fn cmd_sweep(base: &RunManifest, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut whole: Option<MetricsSummary> = None;
    for value in values {
        let mut m = base.clone();
        m.output = base.output.join(format!("{}={value}", axis.name()));
        let (mut grid, mut config) = load_named(&m.scenario)?;
        config.seed = m.seed;
        apply_overrides(&mut config, &m.overrides)?;
        match axis {
            SweepAxis::LatencyScale => m.overrides.push(format!("latency.scale={value}")),
            SweepAxis::IntervalS => m.overrides.push(format!("budget.interval_s={value}")),
            SweepAxis::LossProb => m.overrides.push(format!("latency.loss_prob={value}")),
            SweepAxis::Groups => m.overrides.push(format!("groups={value}")),
            SweepAxis::DerCount => {
                let n: usize = value.parse().with_context(|| format!("der-count value {value:?}"))?;
                truncate_ders(&mut grid, n);
            }
        }
        apply_overrides(&mut config, &m.overrides[base.overrides.len()..])?;
        let result = execute(&m, &grid, &config)?;
        if axis == SweepAxis::Groups {
            let reference = match &whole {
                Some(s) => s.clone(),
                None => {
                    let s = run_horizon(&grid, &config).map_err(|e| anyhow!("{e}"))?.summary;
                    whole = Some(s.clone());
                    s
                }
            };
            log::info!(
                "groups={value}: decomposition gap {:e} pu",
                decomposition_gap(&reference, &result.output.summary)
            );
        }
        rows.push(SweepRow::new(value, &result.output.summary));
    }
    fs::create_dir_all(&base.output)?;
    let mut csv = csv::Writer::from_writer(create(&base.output.join(SWEEP_FILE))?);
    csv.write_record(["value", "mean_x", "deadline_miss_rate", "total_losses", "violation_intervals"])?;
    for r in &rows {
        csv.write_record([
            r.value.clone(),
            r.mean_x.to_string(),
            r.deadline_miss_rate.to_string(),
            r.total_losses.to_string(),
            r.violation_intervals.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(rows)
}

/// Human-readable table of a run directory.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let missing: Vec<&str> = [INTERVALS_FILE, SUMMARY_FILE, TRACE_FILE, METRICS_FILE]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        bail!("{} is missing {}", dir.display(), missing.join(", "));
    }
    let text = fs::read_to_string(dir.join(INTERVALS_FILE))?;
    let records: Vec<IntervalRecord> = text
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{INTERVALS_FILE} line {}", i + 1)))
        .collect::<Result<_>>()?;
    let summary: MetricsSummary = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)
        .with_context(|| format!("parsing {SUMMARY_FILE}"))?;
    let interval_s = match (records.first(), records.get(1)) {
        (Some(a), Some(b)) => b.start - a.start,
        _ => 300.0,
    };

    let mut out = String::new();
    writeln!(out, "{:>8} {:>10} {:>10} {:>6} {:>10} {:>12}  flags", "interval", "x_s", "slack_s", "miss", "violations", "losses")?;
    for r in &records {
        let mut flags = Vec::new();
        if r.carried_over {
            flags.push("CARRIED_OVER");
        }
        if r.comms_failed {
            flags.push("COMMS_FAILED");
        }
        if r.stale_reports {
            flags.push("STALE_REPORTS");
        }
        writeln!(
            out,
            "{:>8} {:>10.3} {:>10.3} {:>6} {:>10} {:>12.6e}  {}",
            r.interval,
            r.x_elapsed_s,
            interval_s - r.x_elapsed_s,
            if r.deadline_met { "" } else { "yes" },
            r.violations,
            r.losses,
            flags.join(",")
        )?;
    }
    writeln!(out)?;
    writeln!(out, "intervals            {}", summary.intervals)?;
    writeln!(out, "total losses (pu)    {:.6e}", summary.total_losses)?;
    writeln!(out, "violation intervals  {}", summary.violation_intervals)?;
    writeln!(out, "deadline misses      {} ({:.1}%)", summary.deadline_misses, 100.0 * summary.deadline_miss_rate)?;
    writeln!(out, "carried over         {}", summary.carried_over)?;
    writeln!(out, "mean x (s)           {:.3}", summary.mean_x_s)?;
    writeln!(out, "max x (s)            {:.3}", summary.max_x_s)?;
    Ok(out)
}

/// Sensitivity matrix of one feeder at the initial setpoints.
pub fn cmd_vlsm(args: &VlsmArgs) -> Result<String> {
    let (grid, _) = load_named(&args.scenario)?;
    let fi = grid.feeder_index(&args.feeder).ok_or_else(|| anyhow!("unknown feeder {}", args.feeder))?;
    let state = snapshot_at(&grid, args.interval).map_err(|e| anyhow!("{e}"))?;
    let controls = ControlVector::initial(&grid);
    let sol = solve_meshed(&full_network(&grid, &state, &controls), &SolverOptions::newton())?;
    let head = grid.head_indices()[fi];
    let m = compute_vlsm(&grid, fi, &state, &controls, sol.v_mag[head])?;
    Ok(m.to_csv())
}

/// Writes reference bundles under `out`.
pub fn cmd_bundle(name: Option<&str>, out: &Path) -> Result<Vec<PathBuf>> {
    let names: Vec<&str> = match name {
        Some(n) => vec![n],
        None => tdvvc::reference::NAMES.to_vec(),
    };
    let mut written = Vec::new();
    for n in names {
        let (grid, config) = tdvvc::reference::by_name(n).ok_or_else(|| anyhow!("no reference scenario {n:?}"))?;
        let dir = out.join(n);
        write_scenario(&dir, &grid, &config).map_err(|e| anyhow!("{e}"))?;
        written.push(dir);
    }
    Ok(written)
}

/// Executes a parsed command line, printing to stdout.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let m = RunManifest::from_args(&args.scenario, args.baseline)?;
            let r = cmd_run(&m)?;
            let s = &r.output.summary;
            println!(
                "{} intervals, {} violation intervals, {} deadline misses, mean x {:.3} s, losses {:.6e} pu -> {}",
                s.intervals,
                s.violation_intervals,
                s.deadline_misses,
                s.mean_x_s,
                s.total_losses,
                m.output.display()
            );
        }
        Command::Sweep(args) => {
            let m = RunManifest::from_args(&args.scenario, false)?;
            let rows = cmd_sweep(&m, args.axis, &args.values)?;
            println!("{:>12} {:>10} {:>10} {:>14} {:>10}", args.axis.name(), "mean_x", "miss_rate", "losses", "viol_int");
            for r in rows {
                println!(
                    "{:>12} {:>10.3} {:>10.4} {:>14.6e} {:>10}",
                    r.value, r.mean_x, r.deadline_miss_rate, r.total_losses, r.violation_intervals
                );
            }
        }
        Command::Report { dir } => print!("{}", cmd_report(&dir)?),
        Command::Vlsm(args) => {
            let csv = cmd_vlsm(&args)?;
            match &args.out {
                Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Bundle { name, out } => {
            for d in cmd_bundle(name.as_deref(), &out)? {
                println!("{}", d.display());
            }
        }
    }
    Ok(())
}
