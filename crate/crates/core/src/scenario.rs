//! Scenario bundles: `scenario.json` (topology, devices, [`SimConfig`]),
//! `loads.csv` (`interval,bus,p_pu,q_pu`) and `pv.csv`
//! (`interval,der,p_avail_pu`).
//!
//! Buses without load rows carry zero load. A bus or PV unit with rows for
//! only part of the horizon is an error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{ForcedLoss, Framing, LatencyConfig};
use crate::coordinator::{GroupsSpec, TimingBudget};
use crate::model::{Branch, Bus, DerKind, FeederModel, GridModel, LoadPoint, ShuntCapacitor, ValidationError};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const LOADS_FILE: &str = "loads.csv";
pub const PV_FILE: &str = "pv.csv";

/// Resolution of every time series, seconds.
pub const SERIES_STEP_S: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Solve durations come from the timing budget.
    #[default]
    Simulated,
    /// Solve durations are the measured wall-clock time of the solvers.
    WallClock,
}

fn yes() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

/// Everything about a run that is not the grid itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    /// Number of control intervals to run; the whole series when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub budget: TimingBudget,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub framing: Framing,
    /// Background SCADA poll period; no polling when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scada_poll_period_s: Option<f64>,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forced_losses: Vec<ForcedLoss>,
    /// `false` runs the uncontrolled baseline.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub controlled: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: None,
            budget: TimingBudget::default(),
            latency: LatencyConfig::default(),
            framing: Framing::default(),
            scada_poll_period_s: None,
            clock: ClockMode::default(),
            groups: None,
            forced_losses: Vec::new(),
            controlled: true,
        }
    }
}

impl SimConfig {
    /// Applies a `key=value` override. `key` is a dotted path into the JSON
    /// form of the config (`budget.ems_solve_s`, `latency.scale`, ...);
    /// `value` is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let bad = |reason: String| ScenarioError::Override { key: key.to_owned(), reason };
        let mut root = serde_json::to_value(&*self).map_err(|e| bad(e.to_string()))?;
        let parsed = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_owned()));
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| bad(format!("{} is not an object", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_owned(), parsed);
                break;
            }
            node = obj
                .entry((*part).to_owned())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        *self = serde_json::from_value(root).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    /// Number of control intervals over a series of `series_len` steps.
    pub fn intervals(&self, series_len: usize) -> usize {
        let span = series_len as f64 * SERIES_STEP_S;
        let n = (span / self.budget.interval_s).ceil() as usize;
        self.horizon.map_or(n, |h| h.min(n))
    }

    /// Series index sampled by control interval `t`.
    pub fn series_index(&self, t: usize) -> usize {
        (t as f64 * self.budget.interval_s / SERIES_STEP_S).floor() as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let b = &self.budget;
        let parts = [
            ("interval_s", b.interval_s),
            ("ems_solve_s", b.ems_solve_s),
            ("ems_to_dms_s", b.ems_to_dms_s),
            ("dms_solve_s", b.dms_solve_s),
            ("dms_der_roundtrip_s", b.dms_der_roundtrip_s),
            ("dms_to_ems_s", b.dms_to_ems_s),
        ];
        for (name, v) in parts {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::Config(format!("budget.{name} = {v} must be positive")));
            }
        }
        if self.horizon == Some(0) {
            return Err(ScenarioError::Config("horizon must be at least 1 interval".into()));
        }
        self.latency
            .table(&self.budget)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        if let Some(p) = self.scada_poll_period_s {
            let (lo, hi) = crate::comms::SCADA_PERIOD_RANGE;
            if !(lo..=hi).contains(&p) {
                return Err(ScenarioError::Config(format!("scada_poll_period_s {p} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: line {line}{}: {message}", field.as_ref().map(|f| format!(", field {f}")).unwrap_or_default())]
    Csv {
        path: PathBuf,
        line: u64,
        field: Option<String>,
        message: String,
    },
    #[error("invalid model: {0}")]
    Validation(#[from] ValidationError),
    #[error("missing series for {entity}: {detail}")]
    MissingSeries { entity: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("override {key}: {reason}")]
    Override { key: String, reason: String },
}

/// On-disk layout of `scenario.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    base_mva: f64,
    #[serde(default)]
    config: SimConfig,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    #[serde(default)]
    capacitors: Vec<ShuntCapacitor>,
    #[serde(default)]
    feeders: Vec<FeederModel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoadRow {
    interval: usize,
    bus: String,
    p_pu: f64,
    q_pu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PvRow {
    interval: usize,
    der: String,
    p_avail_pu: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io { path: path.to_owned(), source }
}

fn csv_err(path: &Path, headers: &[String], e: csv::Error) -> ScenarioError {
    let line = e.position().map_or(0, |p| p.line());
    let field = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.field().map(|f| {
            usize::try_from(f).ok().and_then(|i| headers.get(i)).cloned().unwrap_or_else(|| f.to_string())
        }),
        _ => None,
    };
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.kind().to_string(),
        _ => e.to_string(),
    };
    ScenarioError::Csv { path: path.to_owned(), line, field, message }
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(u64, T)>, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => ScenarioError::Io { path: path.to_owned(), source },
            other => ScenarioError::Csv {
                path: path.to_owned(),
                line: 0,
                field: None,
                message: format!("{other:?}"),
            },
        })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, &[], e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut out = Vec::new();
    for rec in rdr.deserialize::<T>() {
        let row = rec.map_err(|e| csv_err(path, &headers, e))?;
        let line = out.len() as u64 + 2;
        out.push((line, row));
    }
    Ok(out)
}

/// Slots of every load-carrying bus: `(feeder index or None, bus index)`.
fn bus_slots(grid: &GridModel) -> BTreeMap<String, (Option<usize>, usize)> {
    let mut m = BTreeMap::new();
    for (i, b) in grid.buses.iter().enumerate() {
        m.insert(b.id.clone(), (None, i));
    }
    for (fi, f) in grid.feeders.iter().enumerate() {
        for (i, b) in f.buses.iter().enumerate() {
            m.insert(b.id.clone(), (Some(fi), i));
        }
    }
    m
}

/// Reads and validates a scenario bundle directory.
pub fn load_scenario(dir: &Path) -> Result<(GridModel, SimConfig), ScenarioError> {
    let path = dir.join(SCENARIO_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| ScenarioError::Json {
        path: path.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.config.validate()?;
    let mut grid = GridModel {
        name: file.name,
        base_mva: file.base_mva,
        buses: file.buses,
        branches: file.branches,
        capacitors: file.capacitors,
        feeders: file.feeders,
        load_series: Vec::new(),
    };

    let loads_path = dir.join(LOADS_FILE);
    let loads: Vec<(u64, LoadRow)> = read_rows(&loads_path)?;
    let pv_path = dir.join(PV_FILE);
    let pv: Vec<(u64, PvRow)> = if pv_path.exists() { read_rows(&pv_path)? } else { Vec::new() };

    let horizon = loads
        .iter()
        .map(|(_, r)| r.interval + 1)
        .chain(pv.iter().map(|(_, r)| r.interval + 1))
        .max()
        .ok_or_else(|| ScenarioError::MissingSeries {
            entity: LOADS_FILE.into(),
            detail: "no rows".into(),
        })?;

    let slots = bus_slots(&grid);
    let mut sub: Vec<Vec<Option<LoadPoint>>> = vec![Vec::new(); grid.buses.len()];
    let mut fed: Vec<Vec<Vec<Option<LoadPoint>>>> =
        grid.feeders.iter().map(|f| vec![Vec::new(); f.buses.len()]).collect();
    for (line, row) in &loads {
        let &(fi, i) = slots.get(&row.bus).ok_or_else(|| ScenarioError::Csv {
            path: loads_path.clone(),
            line: *line,
            field: Some("bus".into()),
            message: format!("unknown bus {}", row.bus),
        })?;
        let series = match fi {
            None => &mut sub[i],
            Some(fi) => &mut fed[fi][i],
        };
        if series.is_empty() {
            *series = vec![None; horizon];
        }
        if series[row.interval].replace((row.p_pu, row.q_pu)).is_some() {
            return Err(ScenarioError::Csv {
                path: loads_path.clone(),
                line: *line,
                field: Some("interval".into()),
                message: format!("duplicate row for bus {} interval {}", row.bus, row.interval),
            });
        }
    }
    let finish = |id: &str, s: Vec<Option<LoadPoint>>| -> Result<Vec<LoadPoint>, ScenarioError> {
        if s.is_empty() {
            return Ok(vec![(0.0, 0.0); horizon]);
        }
        s.into_iter()
            .enumerate()
            .map(|(t, v)| {
                v.ok_or_else(|| ScenarioError::MissingSeries {
                    entity: id.to_owned(),
                    detail: format!("no load row for interval {t}"),
                })
            })
            .collect()
    };
    grid.load_series = sub
        .into_iter()
        .zip(&grid.buses)
        .map(|(s, b)| finish(&b.id, s))
        .collect::<Result<_, _>>()?;
    for (f, series) in grid.feeders.iter_mut().zip(fed) {
        f.load_series = series
            .into_iter()
            .zip(&f.buses)
            .map(|(s, b)| finish(&b.id, s))
            .collect::<Result<_, _>>()?;
    }

    let mut der_slot = BTreeMap::new();
    for (fi, f) in grid.feeders.iter().enumerate() {
        for (d, der) in f.ders.iter().enumerate() {
            der_slot.insert(der.id.clone(), (fi, d));
        }
    }
    let mut pv_series: Vec<Vec<Vec<Option<f64>>>> =
        grid.feeders.iter().map(|f| vec![Vec::new(); f.ders.len()]).collect();
    for (line, row) in &pv {
        let &(fi, d) = der_slot.get(&row.der).ok_or_else(|| ScenarioError::Csv {
            path: pv_path.clone(),
            line: *line,
            field: Some("der".into()),
            message: format!("unknown DER {}", row.der),
        })?;
        if grid.feeders[fi].ders[d].kind != DerKind::PvInverter {
            return Err(ScenarioError::Csv {
                path: pv_path.clone(),
                line: *line,
                field: Some("der".into()),
                message: format!("{} is not a PV inverter", row.der),
            });
        }
        let s = &mut pv_series[fi][d];
        if s.is_empty() {
            *s = vec![None; horizon];
        }
        if s[row.interval].replace(row.p_avail_pu).is_some() {
            return Err(ScenarioError::Csv {
                path: pv_path.clone(),
                line: *line,
                field: Some("interval".into()),
                message: format!("duplicate row for {} interval {}", row.der, row.interval),
            });
        }
    }
    for (f, series) in grid.feeders.iter_mut().zip(pv_series) {
        f.pv_series = f
            .ders
            .iter()
            .zip(series)
            .map(|(der, s)| {
                if der.kind != DerKind::PvInverter {
                    return Ok(Vec::new());
                }
                if s.is_empty() {
                    return Err(ScenarioError::MissingSeries {
                        entity: der.id.clone(),
                        detail: format!("no rows in {PV_FILE}"),
                    });
                }
                s.into_iter()
                    .enumerate()
                    .map(|(t, v)| {
                        v.ok_or_else(|| ScenarioError::MissingSeries {
                            entity: der.id.clone(),
                            detail: format!("no availability row for interval {t}"),
                        })
                    })
                    .collect()
            })
            .collect::<Result<_, _>>()?;
    }

    grid.validate(horizon)?;
    Ok((grid, file.config))
}

/// Writes a bundle that [`load_scenario`] reads back to an equal model.
pub fn write_scenario(dir: &Path, grid: &GridModel, config: &SimConfig) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let file = ScenarioFile {
        name: grid.name.clone(),
        base_mva: grid.base_mva,
        config: config.clone(),
        buses: grid.buses.clone(),
        branches: grid.branches.clone(),
        capacitors: grid.capacitors.clone(),
        feeders: grid.feeders.clone(),
    };
    let path = dir.join(SCENARIO_FILE);
    let mut json = serde_json::to_string_pretty(&file).expect("scenario serializes");
    json.push('\n');
    std::fs::write(&path, json).map_err(io_err(&path))?;

    let horizon = grid.horizon();
    let path = dir.join(LOADS_FILE);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path).map_err(io_err(&path))?));
    for t in 0..horizon {
        let sub = grid.buses.iter().zip(&grid.load_series);
        let fed = grid.feeders.iter().flat_map(|f| f.buses.iter().zip(&f.load_series));
        for (b, s) in sub.chain(fed) {
            let (p_pu, q_pu) = s[t];
            w.serialize(LoadRow { interval: t, bus: b.id.clone(), p_pu, q_pu })
                .map_err(|e| csv_err(&path, &[], e))?;
        }
    }
    w.into_inner()
        .map_err(|e| io_err(&path)(e.into_error()))?
        .flush()
        .map_err(io_err(&path))?;

    let path = dir.join(PV_FILE);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(&path).map_err(io_err(&path))?));
    w.write_record(["interval", "der", "p_avail_pu"]).map_err(|e| csv_err(&path, &[], e))?;
    for t in 0..horizon {
        for f in &grid.feeders {
            for (der, s) in f.ders.iter().zip(&f.pv_series) {
                if der.kind == DerKind::PvInverter {
                    w.serialize(PvRow { interval: t, der: der.id.clone(), p_avail_pu: s[t] })
                        .map_err(|e| csv_err(&path, &[], e))?;
                }
            }
        }
    }
    w.into_inner()
        .map_err(|e| io_err(&path)(e.into_error()))?
        .flush()
        .map_err(io_err(&path))?;
    Ok(())
}
