//! The control loop: per interval, an EMS decision, DMS disaggregation and
//! flexibility reporting, and a simulated message exchange that decides
//! whether the new setpoints arrive in time to be applied.
//!
//! Numerics and timing are computed separately. The numerical step produces
//! candidate setpoints and next-interval reports; the timing step plays the
//! message sequence through [`CommsNet`]. The candidate is committed only if
//! every report reaches the EMS by the end of the interval, otherwise the
//! previous setpoints and reports stay in force.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{
    CommsError, CommsNet, EventKind, LatencyModel, LatencyTable, PayloadKind, SendRequest, Timer, TraceRecord,
};
use crate::dms::{DmsController, FlexibilityReport, OperatingPointRequest};
use crate::ems::{ems_optimize, BoundaryBus, EmsArea, EmsDecision, EmsOptions};
use crate::model::{snapshot_at, ControlVector, GridModel, NetworkState};
use crate::network::{feeder_network, full_network};
use crate::powerflow::{solve_meshed, solve_radial, total_violations, SolverOptions};
use crate::scenario::{ClockMode, SimConfig};

/// Nominal seconds allotted to each phase of one control interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBudget {
    pub interval_s: f64,
    pub ems_solve_s: f64,
    pub ems_to_dms_s: f64,
    pub dms_solve_s: f64,
    pub dms_der_roundtrip_s: f64,
    pub dms_to_ems_s: f64,
}

impl Default for TimingBudget {
    fn default() -> Self {
        Self {
            interval_s: 300.0,
            ems_solve_s: 45.0,
            ems_to_dms_s: 15.0,
            dms_solve_s: 30.0,
            dms_der_roundtrip_s: 120.0,
            dms_to_ems_s: 60.0,
        }
    }
}

impl TimingBudget {
    pub fn components(&self) -> [f64; 5] {
        [self.ems_solve_s, self.ems_to_dms_s, self.dms_solve_s, self.dms_der_roundtrip_s, self.dms_to_ems_s]
    }

    pub fn budget_sum(&self) -> f64 {
        self.components().iter().sum()
    }

    /// Time left in the interval after the nominal phases; negative when the
    /// budget overruns.
    pub fn slack_s(&self) -> f64 {
        self.interval_s - self.budget_sum()
    }
}

/// A substation group as declared in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub feeders: Vec<String>,
    /// Sub-transmission buses owned by the group.
    pub buses: Vec<String>,
}

/// How the system is split into substation groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupsSpec {
    /// Automatic partition into this many groups.
    Count(usize),
    Explicit(Vec<GroupSpec>),
}

/// A resolved substation group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstationGroup {
    pub id: String,
    /// Feeder indices, ascending.
    pub feeders: Vec<usize>,
    /// Sub-transmission bus indices, ascending.
    pub buses: Vec<usize>,
}

impl SubstationGroup {
    /// Buses outside the group joined to it by a branch, ascending.
    pub fn boundary(&self, grid: &GridModel) -> Vec<usize> {
        let mut out = Vec::new();
        for br in &grid.branches {
            let (Some(f), Some(t)) = (grid.bus_index(&br.from), grid.bus_index(&br.to)) else { continue };
            let (fin, tin) = (self.buses.binary_search(&f).is_ok(), self.buses.binary_search(&t).is_ok());
            if fin && !tin {
                out.push(t);
            } else if tin && !fin {
                out.push(f);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("communication setup: {0}")]
    Comms(#[from] CommsError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("initial power flow failed: {0}")]
    PowerFlow(#[from] crate::powerflow::PowerFlowError),
}

/// One group per electrical island.
pub fn island_groups(grid: &GridModel) -> Vec<SubstationGroup> {
    let heads = grid.head_indices();
    grid.islands()
        .into_iter()
        .enumerate()
        .map(|(k, buses)| SubstationGroup {
            id: format!("G{}", k + 1),
            feeders: (0..grid.feeders.len()).filter(|&f| buses.binary_search(&heads[f]).is_ok()).collect(),
            buses,
        })
        .collect()
}

/// `k` groups of consecutive feeders; every other bus joins the group whose
/// feeder head is nearest in branch hops (ties to the lower group).
pub fn auto_groups(grid: &GridModel, k: usize) -> Result<Vec<SubstationGroup>, CoordinatorError> {
    let nf = grid.feeders.len();
    if k == 0 || k > nf {
        return Err(CoordinatorError::Partition(format!("cannot split {nf} feeders into {k} groups")));
    }
    let n = grid.buses.len();
    let heads = grid.head_indices();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut feeders = vec![Vec::new(); k];
    let mut queue = VecDeque::new();
    for f in 0..nf {
        let g = f * k / nf;
        feeders[g].push(f);
        if owner[heads[f]].is_none() {
            owner[heads[f]] = Some(g);
            queue.push_back(heads[f]);
        }
    }
    let mut adj = vec![Vec::new(); n];
    for br in &grid.branches {
        if let (Some(a), Some(b)) = (grid.bus_index(&br.from), grid.bus_index(&br.to)) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if owner[v].is_none() {
                owner[v] = owner[u];
                queue.push_back(v);
            }
        }
    }
    let mut buses = vec![Vec::new(); k];
    for (b, o) in owner.iter().enumerate() {
        buses[o.unwrap_or(0)].push(b);
    }
    Ok((0..k)
        .map(|g| SubstationGroup { id: format!("G{}", g + 1), feeders: feeders[g].clone(), buses: buses[g].clone() })
        .collect())
}

/// Resolves named groups and checks they partition both feeders and
/// sub-transmission buses, with every feeder in the group owning its head.
pub fn resolve_groups(grid: &GridModel, specs: &[GroupSpec]) -> Result<Vec<SubstationGroup>, CoordinatorError> {
    let bad = |s: String| CoordinatorError::Partition(s);
    let mut groups = Vec::new();
    for g in specs {
        let mut feeders = g
            .feeders
            .iter()
            .map(|id| grid.feeder_index(id).ok_or_else(|| bad(format!("group {}: unknown feeder {id}", g.id))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut buses = g
            .buses
            .iter()
            .map(|id| grid.bus_index(id).ok_or_else(|| bad(format!("group {}: unknown bus {id}", g.id))))
            .collect::<Result<Vec<_>, _>>()?;
        feeders.sort_unstable();
        buses.sort_unstable();
        groups.push(SubstationGroup { id: g.id.clone(), feeders, buses });
    }
    validate_partition(grid, &groups)?;
    Ok(groups)
}

pub fn validate_partition(grid: &GridModel, groups: &[SubstationGroup]) -> Result<(), CoordinatorError> {
    let bad = |s: String| Err(CoordinatorError::Partition(s));
    let mut feeder_owner = vec![None; grid.feeders.len()];
    let mut bus_owner = vec![None; grid.buses.len()];
    for (gi, g) in groups.iter().enumerate() {
        for &f in &g.feeders {
            if let Some(o) = feeder_owner[f].replace(gi) {
                return bad(format!("feeder {} in groups {} and {}", grid.feeders[f].id, groups[o].id, g.id));
            }
        }
        for &b in &g.buses {
            if let Some(o) = bus_owner[b].replace(gi) {
                return bad(format!("bus {} in groups {} and {}", grid.buses[b].id, groups[o].id, g.id));
            }
        }
    }
    if let Some(f) = feeder_owner.iter().position(Option::is_none) {
        return bad(format!("feeder {} in no group", grid.feeders[f].id));
    }
    if let Some(b) = bus_owner.iter().position(Option::is_none) {
        return bad(format!("bus {} in no group", grid.buses[b].id));
    }
    let heads = grid.head_indices();
    for (f, &h) in heads.iter().enumerate() {
        if feeder_owner[f] != bus_owner[h] {
            return bad(format!("feeder {} and its head bus are in different groups", grid.feeders[f].id));
        }
    }
    Ok(())
}

/// Phase at which an interval stopped short.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EmsSolve,
    Requests,
    DmsSolve,
    DerDispatch,
    Reports,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: usize,
    pub start: f64,
    pub ems_done: Option<f64>,
    pub requests_delivered: Option<f64>,
    pub dms_done: Option<f64>,
    pub ders_acked: Option<f64>,
    pub reports_delivered: Option<f64>,
    pub deadline_met: bool,
    /// Seconds of solve and communication time consumed; the full interval
    /// when the exchange did not complete.
    pub x_elapsed_s: f64,
    /// Total network losses with the applied setpoints, per-unit.
    pub losses: f64,
    /// Buses outside their voltage bounds with the applied setpoints.
    pub violations: usize,
    pub worst_deviation: f64,
    pub carried_over: bool,
    /// First phase not completed by the deadline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missed_phase: Option<Phase>,
    pub retransmissions: u32,
    /// A frame was lost twice.
    pub comms_failed: bool,
    pub stale_reports: bool,
    pub ems_feasible: bool,
    pub dms_feasible: bool,
    /// Largest head-power tracking error over feeders, per-unit.
    pub tracking_error: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl IntervalRecord {
    /// Phase durations in order; defined for completed intervals.
    pub fn phase_durations(&self) -> Option<[f64; 5]> {
        let t = [
            self.start,
            self.ems_done?,
            self.requests_delivered?,
            self.dms_done?,
            self.ders_acked?,
            self.reports_delivered?,
        ];
        Some([t[1] - t[0], t[2] - t[1], t[3] - t[2], t[4] - t[3], t[5] - t[4]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub intervals: usize,
    pub total_losses: f64,
    pub violation_intervals: usize,
    /// Violation intervals excluding the first one.
    pub violation_intervals_after_first: usize,
    pub deadline_misses: usize,
    pub deadline_miss_rate: f64,
    pub carried_over: usize,
    pub mean_x_s: f64,
    pub max_x_s: f64,
    pub retransmissions: u32,
}

impl MetricsSummary {
    pub fn from_records(records: &[IntervalRecord]) -> Self {
        let n = records.len();
        let misses = records.iter().filter(|r| !r.deadline_met).count();
        let xs: f64 = records.iter().map(|r| r.x_elapsed_s).sum();
        Self {
            intervals: n,
            total_losses: records.iter().map(|r| r.losses).sum(),
            violation_intervals: records.iter().filter(|r| r.violations > 0).count(),
            violation_intervals_after_first: records.iter().skip(1).filter(|r| r.violations > 0).count(),
            deadline_misses: misses,
            deadline_miss_rate: if n == 0 { 0.0 } else { misses as f64 / n as f64 },
            carried_over: records.iter().filter(|r| r.carried_over).count(),
            mean_x_s: if n == 0 { 0.0 } else { xs / n as f64 },
            max_x_s: records.iter().map(|r| r.x_elapsed_s).fold(0.0, f64::max),
            retransmissions: records.iter().map(|r| r.retransmissions).sum(),
        }
    }
}

/// Extra losses of a grouped run relative to the whole-system run.
pub fn decomposition_gap(whole: &MetricsSummary, grouped: &MetricsSummary) -> f64 {
    grouped.total_losses - whole.total_losses
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IntervalRecord>,
    pub summary: MetricsSummary,
    pub trace: Vec<TraceRecord>,
    pub groups: Vec<SubstationGroup>,
    /// Setpoints in force during each interval.
    pub controls: Vec<ControlVector>,
}

impl RunOutput {
    pub fn write_records_jsonl<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_records_jsonl(w, &self.records)
    }
}

pub fn write_records_jsonl<W: Write>(mut w: W, records: &[IntervalRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub const EMS_ENDPOINT: &str = "EMS";

pub fn dms_endpoint(feeder: &str) -> String {
    format!("DMS:{feeder}")
}

pub fn der_endpoint(feeder: &str, der: &str) -> String {
    format!("DER:{feeder}/{der}")
}

/// Solve times for one interval, seconds.
#[derive(Debug, Clone)]
struct SolveTimes {
    ems: f64,
    dms: Vec<f64>,
}

/// Timestamps collected while replaying one interval's messages.
#[derive(Debug, Clone, Default)]
struct Timing {
    ems_done: Option<f64>,
    requests_delivered: Option<f64>,
    dms_done: Option<f64>,
    ders_acked: Option<f64>,
    reports_delivered: Option<f64>,
    retransmissions: u32,
    failed: bool,
}

impl Timing {
    fn missed_phase(&self) -> Option<Phase> {
        if self.ems_done.is_none() {
            Some(Phase::EmsSolve)
        } else if self.requests_delivered.is_none() {
            Some(Phase::Requests)
        } else if self.dms_done.is_none() {
            Some(Phase::DmsSolve)
        } else if self.ders_acked.is_none() {
            Some(Phase::DerDispatch)
        } else if self.reports_delivered.is_none() {
            Some(Phase::Reports)
        } else {
            None
        }
    }
}

struct FeederLinks {
    dms: String,
    ders: Vec<(String, LatencyModel)>,
}

/// Numerical outcome of one interval before the commit decision.
struct Candidate {
    controls: ControlVector,
    reports: Vec<FlexibilityReport>,
    ems_feasible: bool,
    dms_feasible: bool,
    tracking_error: f64,
    errors: Vec<String>,
    times: SolveTimes,
}

/// Runs the closed loop over a whole scenario.
pub struct Coordinator<'a> {
    grid: &'a GridModel,
    config: &'a SimConfig,
    groups: Vec<SubstationGroup>,
    table: LatencyTable,
    comms: CommsNet,
    links: Vec<FeederLinks>,
    /// Feeder indices in id order, the request stagger order.
    stagger: Vec<usize>,
    dms: Vec<DmsController>,
    ems_options: EmsOptions,
}

impl<'a> Coordinator<'a> {
    pub fn new(grid: &'a GridModel, config: &'a SimConfig, groups: Vec<SubstationGroup>) -> Result<Self, CoordinatorError> {
        validate_partition(grid, &groups)?;
        config.validate().map_err(|e| CoordinatorError::Config(e.to_string()))?;
        let table = config.latency.table(&config.budget)?;
        let mut comms = CommsNet::new(config.seed, config.framing, config.latency.timeout_s);
        comms.set_forced_losses(config.forced_losses.clone());
        comms.register(EMS_ENDPOINT);
        let mut links = Vec::new();
        for f in &grid.feeders {
            let dms = dms_endpoint(&f.id);
            comms.register(dms.clone());
            let ders = f
                .ders
                .iter()
                .map(|d| {
                    let ep = der_endpoint(&f.id, &d.id);
                    comms.register(ep.clone());
                    (ep, table.der_tier(d.network_tier).clone())
                })
                .collect();
            links.push(FeederLinks { dms, ders });
        }
        let mut stagger: Vec<usize> = (0..grid.feeders.len()).collect();
        stagger.sort_by(|&a, &b| grid.feeders[a].id.cmp(&grid.feeders[b].id));
        Ok(Self {
            grid,
            config,
            groups,
            table,
            comms,
            links,
            stagger,
            dms: (0..grid.feeders.len()).map(DmsController::new).collect(),
            ems_options: EmsOptions::default(),
        })
    }

    fn snapshot(&self, t: usize) -> NetworkState {
        let last = self.grid.horizon().saturating_sub(1);
        let idx = self.config.series_index(t).min(last);
        snapshot_at(self.grid, idx).expect("index clamped to horizon")
    }

    /// Runs every interval of the configured horizon.
    pub fn run(mut self) -> Result<RunOutput, CoordinatorError> {
        let n = self.config.intervals(self.grid.horizon());
        if n == 0 {
            return Err(CoordinatorError::Config("horizon has no intervals".into()));
        }
        let mut controls = ControlVector::initial(self.grid);
        let mut reports: Option<Vec<FlexibilityReport>> = None;
        let mut stale = false;
        let mut boundary_v: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut records = Vec::with_capacity(n);
        let mut applied = Vec::with_capacity(n);
        for t in 0..n {
            let s_t = self.snapshot(t);
            let start = t as f64 * self.config.budget.interval_s;
            if !self.config.controlled {
                let (eval, _) = evaluate(self.grid, &s_t, &controls)?;
                records.push(IntervalRecord {
                    interval: t,
                    start,
                    ems_done: None,
                    requests_delivered: None,
                    dms_done: None,
                    ders_acked: None,
                    reports_delivered: None,
                    deadline_met: true,
                    x_elapsed_s: 0.0,
                    losses: eval.losses,
                    violations: eval.violations,
                    worst_deviation: eval.worst,
                    carried_over: false,
                    missed_phase: None,
                    retransmissions: 0,
                    comms_failed: false,
                    stale_reports: false,
                    ems_feasible: true,
                    dms_feasible: true,
                    tracking_error: 0.0,
                    errors: Vec::new(),
                });
                applied.push(controls.clone());
                continue;
            }
            let s_next = if t + 1 < n { self.snapshot(t + 1) } else { s_t.clone() };

            // Operating point under the setpoints in force.
            let (_, now_sol) = evaluate(self.grid, &s_t, &controls)?;
            let (vb, tb) = boundary_v.clone().unwrap_or_else(|| sub_voltages(self.grid, &now_sol));
            let current = match &reports {
                Some(r) => r.clone(),
                None => cold_start_reports(self.grid, t, &s_t, &controls, &now_sol)?,
            };
            let stale_reports = stale || reports_stale(&current, t);
            let cand = self.control_step(t, &s_t, &s_next, &controls, &current, stale_reports, &vb, &tb);
            let times = match self.config.clock {
                ClockMode::Simulated => SolveTimes {
                    ems: self.config.budget.ems_solve_s,
                    dms: vec![self.config.budget.dms_solve_s; self.grid.feeders.len()],
                },
                ClockMode::WallClock => cand.times.clone(),
            };
            let timing = self.simulate_timing(t, start, &times)?;
            let deadline = start + self.config.budget.interval_s;
            let deadline_met = !timing.failed && timing.reports_delivered.is_some_and(|r| r <= deadline);

            let mut errors = cand.errors.clone();
            if timing.failed {
                errors.push("frame lost after retransmission".into());
            }
            if deadline_met {
                controls = cand.controls;
                reports = Some(cand.reports);
                stale = false;
            } else {
                stale = true;
            }
            let (eval, sol) = evaluate(self.grid, &s_t, &controls)?;
            boundary_v = Some(sub_voltages(self.grid, &sol));
            let mut rec = IntervalRecord {
                interval: t,
                start,
                ems_done: timing.ems_done,
                requests_delivered: timing.requests_delivered,
                dms_done: timing.dms_done,
                ders_acked: timing.ders_acked,
                reports_delivered: timing.reports_delivered,
                deadline_met,
                x_elapsed_s: self.config.budget.interval_s,
                losses: eval.losses,
                violations: eval.violations,
                worst_deviation: eval.worst,
                carried_over: !deadline_met,
                missed_phase: timing.missed_phase(),
                retransmissions: timing.retransmissions,
                comms_failed: timing.failed,
                stale_reports,
                ems_feasible: cand.ems_feasible,
                dms_feasible: cand.dms_feasible,
                tracking_error: cand.tracking_error,
                errors,
            };
            if deadline_met {
                let d = rec.phase_durations().expect("complete interval");
                rec.x_elapsed_s = d.iter().sum();
            }
            records.push(rec);
            applied.push(controls.clone());
        }
        let summary = MetricsSummary::from_records(&records);
        let trace = self.comms.take_trace();
        Ok(RunOutput { records, summary, trace, groups: self.groups, controls: applied })
    }

    #[allow(clippy::too_many_arguments)]
    fn control_step(
        &self,
        t: usize,
        s_t: &NetworkState,
        s_next: &NetworkState,
        controls: &ControlVector,
        reports: &[FlexibilityReport],
        stale: bool,
        v_sub: &[f64],
        th_sub: &[f64],
    ) -> Candidate {
        let grid = self.grid;
        let mut errors = Vec::new();

        // EMS, one problem per connected piece of each group.
        let areas: Vec<EmsArea> = self
            .groups
            .iter()
            .flat_map(|g| {
                let boundary = g
                    .boundary(grid)
                    .into_iter()
                    .map(|b| BoundaryBus { bus: b, v: v_sub[b], theta: th_sub[b] })
                    .collect();
                EmsArea::new(grid, g.buses.clone(), boundary).components(grid)
            })
            .collect();
        let ems_start = Instant::now();
        let decisions: Vec<Result<EmsDecision, String>> = areas
            .par_iter()
            .map(|a| {
                ems_optimize(grid, a, s_t, controls, reports, stale, &self.ems_options).map_err(|e| e.to_string())
            })
            .collect();
        let ems_time = ems_start.elapsed().as_secs_f64();

        let mut cand = controls.clone();
        let mut requests: BTreeMap<usize, OperatingPointRequest> = BTreeMap::new();
        let mut ems_feasible = true;
        for (a, d) in areas.iter().zip(decisions) {
            match d {
                Ok(d) => {
                    ems_feasible &= d.feasible;
                    d.apply(grid, &mut cand);
                    for (&f, mut r) in a.feeders.iter().zip(d.requests) {
                        r.interval = t;
                        requests.insert(f, r);
                    }
                }
                Err(e) => {
                    ems_feasible = false;
                    errors.push(format!("ems: {e}"));
                }
            }
        }

        // DMS per feeder, then next-interval reports.
        let outcomes: Vec<_> = (0..grid.feeders.len())
            .into_par_iter()
            .map(|f| {
                let started = Instant::now();
                let Some(req) = requests.get(&f) else {
                    return (None, Err("no request".to_owned()), 0.0);
                };
                let out = self.dms[f].handle(grid, s_t, &cand, req);
                let (new_controls, plan_ok) = match out {
                    Ok(o) => (Some(o), Ok(())),
                    Err(e) => (None, Err(e.to_string())),
                };
                (new_controls.map(|o| (o, req.clone())), plan_ok, started.elapsed().as_secs_f64())
            })
            .collect();
        let mut dms_feasible = true;
        let mut tracking_error: f64 = 0.0;
        let mut dms_times = Vec::with_capacity(outcomes.len());
        for (f, (out, status, secs)) in outcomes.into_iter().enumerate() {
            dms_times.push(secs);
            if let Err(e) = status {
                dms_feasible = false;
                errors.push(format!("dms {}: {e}", grid.feeders[f].id));
            }
            if let Some((o, req)) = out {
                dms_feasible &= o.plan.feasible;
                tracking_error = tracking_error
                    .max((o.plan.achieved_p - req.p_request).abs())
                    .max((o.plan.achieved_q - req.q_request).abs());
                cand.feeders[f] = o.controls.feeders[f].clone();
            }
        }
        let report_start = Instant::now();
        let next_reports: Vec<FlexibilityReport> = (0..grid.feeders.len())
            .into_par_iter()
            .map(|f| {
                let head_v = requests.get(&f).map(|r| r.substation_voltage_setpoint);
                let fallback = |head_v: f64| {
                    let net = feeder_network(grid, f, s_next, &cand, head_v);
                    let (p, q) = solve_radial(&net, &SolverOptions::sweep())
                        .map(|s| (s.p_inj[0], s.q_inj[0]))
                        .unwrap_or((0.0, 0.0));
                    FlexibilityReport::point(&grid.feeders[f].id, t + 1, p, q)
                };
                let head_v = head_v.unwrap_or(1.0);
                match self.dms[f].report(grid, s_next, &cand, head_v) {
                    Ok(mut r) => {
                        r.interval = t + 1;
                        r
                    }
                    Err(e) => {
                        log::warn!("feeder {}: flexibility report failed: {e}", grid.feeders[f].id);
                        fallback(head_v)
                    }
                }
            })
            .collect();
        let report_time = report_start.elapsed().as_secs_f64();
        for s in dms_times.iter_mut() {
            *s += report_time / grid.feeders.len().max(1) as f64;
        }
        Candidate {
            controls: cand,
            reports: next_reports,
            ems_feasible,
            dms_feasible,
            tracking_error,
            errors,
            times: SolveTimes { ems: ems_time, dms: dms_times },
        }
    }

    fn send(&mut self, req: SendRequest, model: &LatencyModel) -> Result<(), CoordinatorError> {
        self.comms.send(req, model)?;
        Ok(())
    }

    /// Latency model of the link a frame of `kind` travels between `src`
    /// and `dst`.
    fn link_model(&self, kind: PayloadKind, src: &str, dst: &str) -> LatencyModel {
        let der = |ep: &str| {
            self.links
                .iter()
                .flat_map(|l| l.ders.iter())
                .find(|(e, _)| e == ep)
                .map(|(_, m)| m.clone())
                .expect("registered DER endpoint")
        };
        match kind {
            PayloadKind::OpRequest | PayloadKind::ScadaPoll => self.table.ems_to_dms.clone(),
            PayloadKind::FlexibilityReport | PayloadKind::ScadaReply => self.table.dms_to_ems.clone(),
            PayloadKind::DerDispatch => der(dst),
            PayloadKind::DerAck => der(src),
        }
    }

    fn simulate_timing(&mut self, t: usize, start: f64, times: &SolveTimes) -> Result<Timing, CoordinatorError> {
        let nf = self.grid.feeders.len();
        let deadline = start + self.config.budget.interval_s;
        self.comms.begin_interval(t as u64, start);
        if let Some(period) = self.config.scada_poll_period_s {
            let dms: Vec<String> = self.links.iter().map(|l| l.dms.clone()).collect();
            let model = self.table.ems_to_dms.clone();
            self.comms.inject_scada_poll(EMS_ENDPOINT, &dms, period, deadline, &model)?;
        }
        self.comms.schedule_solve(start + times.ems, "ems", EMS_ENDPOINT);

        let mut timing = Timing::default();
        let mut req_at = vec![None; nf];
        let mut dms_done = vec![None; nf];
        let mut pending = vec![0usize; nf];
        let mut acked = vec![None; nf];
        let mut report_at = vec![None; nf];
        let dms_index: BTreeMap<String, usize> =
            self.links.iter().enumerate().map(|(f, l)| (l.dms.clone(), f)).collect();
        let request_label = |f: usize| format!("request:{}", self.grid.feeders[f].id);
        let labels: BTreeMap<String, usize> = (0..nf).map(|f| (request_label(f), f)).collect();

        while let Some(ev) = self.comms.next_event(deadline) {
            match ev.kind {
                EventKind::SolveComplete { task } if task == "ems" => {
                    timing.ems_done = Some(ev.at);
                    let k = self.stagger.len().max(1) as f64;
                    for (i, &f) in self.stagger.clone().iter().enumerate() {
                        let offset = i as f64 * self.config.budget.ems_to_dms_s / k;
                        if offset == 0.0 {
                            let dst = self.links[f].dms.clone();
                            let m = self.link_model(PayloadKind::OpRequest, EMS_ENDPOINT, &dst);
                            self.send(SendRequest::new(EMS_ENDPOINT, &dst, PayloadKind::OpRequest), &m)?;
                        } else {
                            self.comms.schedule_timer(ev.at + offset, request_label(f), EMS_ENDPOINT);
                        }
                    }
                }
                EventKind::Timer(Timer::Label { label }) => {
                    if let Some(&f) = labels.get(&label) {
                        let dst = self.links[f].dms.clone();
                        let m = self.link_model(PayloadKind::OpRequest, EMS_ENDPOINT, &dst);
                        self.send(SendRequest::new(EMS_ENDPOINT, &dst, PayloadKind::OpRequest), &m)?;
                    }
                }
                EventKind::SolveComplete { task } => {
                    let Some(&f) = dms_index.get(&ev.target) else { continue };
                    debug_assert_eq!(task, "dms");
                    dms_done[f] = Some(ev.at);
                    let ders = self.links[f].ders.clone();
                    pending[f] = ders.len();
                    if ders.is_empty() {
                        acked[f] = Some(ev.at);
                        self.send_report(f)?;
                    }
                    for (ep, m) in ders {
                        self.send(SendRequest::new(&self.links[f].dms.clone(), &ep, PayloadKind::DerDispatch), &m)?;
                    }
                }
                EventKind::FrameDelivery { frame } => {
                    let fr = self.comms.frame(frame).clone();
                    match fr.payload_kind {
                        PayloadKind::OpRequest => {
                            let f = dms_index[&fr.dst];
                            req_at[f] = Some(ev.at);
                            self.comms.schedule_solve(ev.at + times.dms[f], "dms", fr.dst.clone());
                        }
                        PayloadKind::DerDispatch => {
                            let m = self.link_model(PayloadKind::DerAck, &fr.dst, &fr.src);
                            self.send(SendRequest::new(&fr.dst, &fr.src, PayloadKind::DerAck), &m)?;
                        }
                        PayloadKind::DerAck => {
                            let f = dms_index[&fr.dst];
                            pending[f] -= 1;
                            if pending[f] == 0 {
                                acked[f] = Some(ev.at);
                                self.send_report(f)?;
                            }
                        }
                        PayloadKind::FlexibilityReport => {
                            let f = dms_index[&fr.src];
                            report_at[f] = Some(ev.at);
                            if report_at.iter().all(Option::is_some) {
                                break;
                            }
                        }
                        PayloadKind::ScadaPoll | PayloadKind::ScadaReply => {}
                    }
                }
                EventKind::Timer(Timer::LossTimeout { frame }) => {
                    let fr = self.comms.frame(frame).clone();
                    if matches!(fr.payload_kind, PayloadKind::ScadaPoll | PayloadKind::ScadaReply) {
                        continue;
                    }
                    if fr.attempt == 0 {
                        timing.retransmissions += 1;
                        let m = self.link_model(fr.payload_kind, &fr.src, &fr.dst);
                        self.send(SendRequest::new(&fr.src, &fr.dst, fr.payload_kind).attempt(1), &m)?;
                    } else {
                        timing.failed = true;
                        break;
                    }
                }
                EventKind::Timer(Timer::ScadaPoll) => {}
            }
        }
        let all = |v: &[Option<f64>]| -> Option<f64> {
            v.iter().try_fold(f64::NEG_INFINITY, |m, x| x.map(|x| m.max(x)))
        };
        if nf == 0 {
            timing.requests_delivered = timing.ems_done;
            timing.dms_done = timing.ems_done;
            timing.ders_acked = timing.ems_done;
            timing.reports_delivered = timing.ems_done;
        } else {
            timing.requests_delivered = all(&req_at);
            timing.dms_done = all(&dms_done);
            timing.ders_acked = all(&acked);
            timing.reports_delivered = all(&report_at);
        }
        Ok(timing)
    }

    fn send_report(&mut self, f: usize) -> Result<(), CoordinatorError> {
        let src = self.links[f].dms.clone();
        let m = self.link_model(PayloadKind::FlexibilityReport, &src, EMS_ENDPOINT);
        self.send(SendRequest::new(&src, EMS_ENDPOINT, PayloadKind::FlexibilityReport), &m)
    }
}

fn reports_stale(reports: &[FlexibilityReport], t: usize) -> bool {
    reports.iter().any(|r| r.interval != t)
}

struct Evaluation {
    losses: f64,
    violations: usize,
    worst: f64,
}

/// Full nonlinear solve of the whole network with `controls` applied.
fn evaluate(
    grid: &GridModel,
    state: &NetworkState,
    controls: &ControlVector,
) -> Result<(Evaluation, crate::powerflow::PowerFlowSolution<f64>), CoordinatorError> {
    let net = full_network(grid, state, controls);
    let sol = solve_meshed(&net, &SolverOptions::newton())?;
    let rep = total_violations(&sol, &net);
    Ok((Evaluation { losses: sol.losses_total, violations: rep.count, worst: rep.worst_deviation }, sol))
}

fn sub_voltages(grid: &GridModel, sol: &crate::powerflow::PowerFlowSolution<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = grid.buses.len();
    (sol.v_mag[..n].to_vec(), sol.v_ang[..n].to_vec())
}

/// Zero-width reports at each feeder's present import.
fn cold_start_reports(
    grid: &GridModel,
    t: usize,
    state: &NetworkState,
    controls: &ControlVector,
    sol: &crate::powerflow::PowerFlowSolution<f64>,
) -> Result<Vec<FlexibilityReport>, CoordinatorError> {
    grid.head_indices()
        .into_iter()
        .enumerate()
        .map(|(f, h)| {
            let net = feeder_network(grid, f, state, controls, sol.v_mag[h]);
            let s = solve_radial(&net, &SolverOptions::sweep())?;
            Ok(FlexibilityReport::point(&grid.feeders[f].id, t, s.p_inj[0], s.q_inj[0]))
        })
        .collect()
}

/// Groups requested by `config`, or one per island.
pub fn groups_for(grid: &GridModel, config: &SimConfig) -> Result<Vec<SubstationGroup>, CoordinatorError> {
    match &config.groups {
        None => Ok(island_groups(grid)),
        Some(GroupsSpec::Count(k)) => auto_groups(grid, *k),
        Some(GroupsSpec::Explicit(specs)) => resolve_groups(grid, specs),
    }
}

/// Closed-loop run with one EMS problem per island.
pub fn run_horizon(grid: &GridModel, config: &SimConfig) -> Result<RunOutput, CoordinatorError> {
    run_grouped(grid, config, island_groups(grid))
}

/// Closed-loop run with one EMS problem per substation group.
pub fn run_grouped(
    grid: &GridModel,
    config: &SimConfig,
    groups: Vec<SubstationGroup>,
) -> Result<RunOutput, CoordinatorError> {
    Coordinator::new(grid, config, groups)?.run()
}

/// Closed-loop run using the grouping in `config`.
pub fn run_configured(grid: &GridModel, config: &SimConfig) -> Result<RunOutput, CoordinatorError> {
    run_grouped(grid, config, groups_for(grid, config)?)
}

/// Uncontrolled run: initial setpoints throughout.
pub fn run_baseline(grid: &GridModel, config: &SimConfig) -> Result<RunOutput, CoordinatorError> {
    let cfg = SimConfig { controlled: false, ..config.clone() };
    run_grouped(grid, &cfg, island_groups(grid))
}
