//! Transmission-side controller: chooses sub-transmission taps, capacitor
//! states and feeder-head operating points that minimize losses subject to
//! voltage and rating limits.
//!
//! Discrete devices are searched one at a time over every position, each
//! candidate evaluated by a full Newton solve. Feeder-head powers move by
//! projected gradient inside their flexibility boxes using central finite
//! differences. Constraints enter as quadratic penalties on bounds tightened
//! by a small margin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dms::{CapacitorSetting, FlexibilityReport, OperatingPointRequest};
use crate::model::{BusKind, ControlVector, GridModel, NetworkState, TapChanger};
use crate::network::{subtransmission_network, Network};
use crate::powerflow::{solve_meshed, total_violations, PowerFlowSolution, SolverOptions, ViolationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmsOptions {
    /// Penalty weight on squared voltage and rating excess.
    pub rho: f64,
    /// Internal tightening of voltage bounds.
    pub margin: f64,
    pub fd_step: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub outer_rounds: usize,
}

impl Default for EmsOptions {
    fn default() -> Self {
        Self { rho: 1e6, margin: 1e-3, fd_step: 1e-4, max_iterations: 300, tolerance: 1e-7, outer_rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmsError {
    #[error("no flexibility report for feeder {0}")]
    MissingReport(String),
    #[error("report for feeder {feeder} has an empty box")]
    EmptyBox { feeder: String },
    #[error("no candidate power flow converged")]
    NoConvergence,
}

/// Bus outside an area held at a fixed voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryBus {
    pub bus: usize,
    pub v: f64,
    pub theta: f64,
}

/// The part of the sub-transmission system one EMS problem covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmsArea {
    /// Sub-transmission bus indices, ascending.
    pub buses: Vec<usize>,
    /// Feeder indices whose head lies in `buses`, ascending.
    pub feeders: Vec<usize>,
    pub boundary: Vec<BoundaryBus>,
}

impl EmsArea {
    /// An area owning `buses`, with the feeders headed there.
    pub fn new(grid: &GridModel, mut buses: Vec<usize>, boundary: Vec<BoundaryBus>) -> Self {
        buses.sort_unstable();
        buses.dedup();
        let heads = grid.head_indices();
        let feeders = (0..grid.feeders.len()).filter(|&f| buses.binary_search(&heads[f]).is_ok()).collect();
        Self { buses, feeders, boundary }
    }

    /// One area per electrical island.
    pub fn islands(grid: &GridModel) -> Vec<Self> {
        grid.islands().into_iter().map(|b| Self::new(grid, b, Vec::new())).collect()
    }

    /// Splits this area into its connected components. Boundary buses are
    /// kept with every component they touch.
    pub fn components(&self, grid: &GridModel) -> Vec<Self> {
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for island in grid.islands() {
            let part: Vec<usize> = island.into_iter().filter(|b| self.buses.binary_search(b).is_ok()).collect();
            if part.is_empty() {
                continue;
            }
            // Connectivity inside the area only.
            let mut left = part.clone();
            while let Some(&seed) = left.first() {
                let mut comp = vec![seed];
                let mut k = 0;
                while k < comp.len() {
                    let u = comp[k];
                    for br in &grid.branches {
                        let (f, t) = (grid.bus_index(&br.from), grid.bus_index(&br.to));
                        let other = match (f, t) {
                            (Some(f), Some(t)) if f == u => t,
                            (Some(f), Some(t)) if t == u => f,
                            _ => continue,
                        };
                        if part.contains(&other) && !comp.contains(&other) {
                            comp.push(other);
                        }
                    }
                    k += 1;
                }
                left.retain(|b| !comp.contains(b));
                comps.push(comp);
            }
        }
        comps.sort_by_key(|c| *c.iter().min().expect("non-empty"));
        comps
            .into_iter()
            .map(|c| {
                let touching: Vec<BoundaryBus> = self
                    .boundary
                    .iter()
                    .filter(|bb| {
                        grid.branches.iter().any(|br| {
                            let (f, t) = (grid.bus_index(&br.from), grid.bus_index(&br.to));
                            (f == Some(bb.bus) && t.is_some_and(|t| c.contains(&t)))
                                || (t == Some(bb.bus) && f.is_some_and(|f| c.contains(&f)))
                        })
                    })
                    .copied()
                    .collect();
                Self::new(grid, c, touching)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapSetting {
    pub id: String,
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmsDecision {
    pub interval: usize,
    pub taps: Vec<TapSetting>,
    pub capacitors: Vec<CapacitorSetting>,
    /// One request per area feeder, in feeder order.
    pub requests: Vec<OperatingPointRequest>,
    pub predicted_losses: f64,
    pub predicted_violations: ViolationReport,
    /// Sum of branch loading above rating.
    pub rating_excess: f64,
    /// No voltage or rating violation at the chosen point.
    pub feasible: bool,
    /// Some report was carried over from an earlier interval.
    pub stale_reports: bool,
}

impl EmsDecision {
    /// Writes the decision's tap and capacitor settings into `controls`.
    pub fn apply(&self, grid: &GridModel, controls: &mut ControlVector) {
        for ts in &self.taps {
            if let Some(k) = grid.branches.iter().position(|b| b.id == ts.id) {
                controls.taps[k] = Some(ts.position);
            }
        }
        for cs in &self.capacitors {
            if let Some(k) = grid.capacitors.iter().position(|c| c.id == cs.id) {
                controls.caps[k] = cs.state;
            }
        }
    }
}

/// The per-feeder requests carried by a decision.
pub fn decision_to_requests(d: &EmsDecision) -> Vec<OperatingPointRequest> {
    d.requests.clone()
}

/// Splits `amount` between two categories in proportion to their headroom.
pub fn split_delta(amount: f64, headroom_a: f64, headroom_b: f64) -> (f64, f64) {
    let (a, b) = (headroom_a.max(0.0), headroom_b.max(0.0));
    let total = a + b;
    if amount <= 0.0 || total <= 0.0 {
        return (0.0, 0.0);
    }
    let amount = amount.min(total);
    (amount * a / total, amount * b / total)
}

/// Curtailment and demand-response request for a head-import change `dp`
/// relative to the forecast. Raising import draws on PV curtailment and
/// added consumption; lowering it draws on reduced consumption only.
pub fn curtailment_and_dr(dp: f64, report: &FlexibilityReport) -> (f64, f64) {
    if dp > 0.0 {
        split_delta(dp, report.pv_curtailable, report.dr_up)
    } else if dp < 0.0 {
        (0.0, (-dp).min(report.dr_down.max(0.0)))
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone)]
enum Device {
    Tap { grid_branch: usize, net_branch: usize, changer: TapChanger },
    Cap { grid_cap: usize, node: usize, q_step: f64, n_steps: u32 },
}

impl Device {
    fn positions(&self) -> u32 {
        match self {
            Device::Tap { changer, .. } => changer.positions(),
            Device::Cap { n_steps, .. } => n_steps + 1,
        }
    }
}

struct AreaModel {
    base: Network<f64>,
    devices: Vec<(String, Device)>,
    heads: Vec<usize>,
    opts: EmsOptions,
}

impl AreaModel {
    fn build(grid: &GridModel, area: &EmsArea, state: &NetworkState, controls: &ControlVector) -> Self {
        let n_sub = grid.buses.len();
        let mut node_of = vec![None; n_sub];
        let mut kept = Vec::new();
        for &b in &area.buses {
            node_of[b] = Some(kept.len());
            kept.push(b);
        }
        for bb in &area.boundary {
            if node_of[bb.bus].is_none() {
                node_of[bb.bus] = Some(kept.len());
                kept.push(bb.bus);
            }
        }
        let owned = |b: usize| area.buses.binary_search(&b).is_ok();

        let mut zeroed = controls.clone();
        for (k, c) in grid.capacitors.iter().enumerate() {
            if grid.bus_index(&c.bus).is_some_and(owned) {
                zeroed.caps[k] = 0;
            }
        }
        let zero_imports = vec![(0.0, 0.0); grid.feeders.len()];
        let full = subtransmission_network(grid, state, &zeroed, &zero_imports);

        let mut base = Network {
            bus_ids: kept.iter().map(|&b| full.bus_ids[b].clone()).collect(),
            buses: kept.iter().map(|&b| full.buses[b].clone()).collect(),
            branch_ids: Vec::new(),
            branches: Vec::new(),
        };
        for bb in &area.boundary {
            let i = node_of[bb.bus].expect("kept");
            let bus = &mut base.buses[i];
            bus.kind = BusKind::Slack;
            bus.v_set = bb.v;
            bus.theta_set = bb.theta;
        }
        let mut devices = Vec::new();
        for (k, br) in full.branches.iter().enumerate() {
            let (Some(f), Some(t)) = (node_of[br.from], node_of[br.to]) else { continue };
            if !owned(br.from) && !owned(br.to) {
                continue;
            }
            let mut nb = br.clone();
            nb.from = f;
            nb.to = t;
            if let Some(changer) = &grid.branches[k].tap {
                if owned(br.from) && owned(br.to) {
                    devices.push((
                        grid.branches[k].id.clone(),
                        Device::Tap { grid_branch: k, net_branch: base.branches.len(), changer: changer.clone() },
                    ));
                }
            }
            base.branch_ids.push(full.branch_ids[k].clone());
            base.branches.push(nb);
        }
        for (k, c) in grid.capacitors.iter().enumerate() {
            let b = grid.bus_index(&c.bus).expect("validated");
            if owned(b) {
                devices.push((
                    c.id.clone(),
                    Device::Cap { grid_cap: k, node: node_of[b].expect("kept"), q_step: c.q_step, n_steps: c.n_steps },
                ));
            }
        }
        devices.sort_by(|a, b| a.0.cmp(&b.0));
        let heads = grid.head_indices();
        let heads = area.feeders.iter().map(|&f| node_of[heads[f]].expect("owned head")).collect();
        Self { base, devices, heads, opts: EmsOptions::default() }
    }

    fn network(&self, positions: &[u32], x: &[(f64, f64)]) -> Network<f64> {
        let mut net = self.base.clone();
        for ((_, dev), &pos) in self.devices.iter().zip(positions) {
            match dev {
                Device::Tap { net_branch, changer, .. } => net.branches[*net_branch].tap = changer.ratio(pos),
                Device::Cap { node, q_step, .. } => net.buses[*node].shunt_b += q_step * f64::from(pos),
            }
        }
        for (&h, &(p, q)) in self.heads.iter().zip(x) {
            net.buses[h].p_inj -= p;
            net.buses[h].q_inj -= q;
        }
        net
    }

    fn penalty(&self, net: &Network<f64>, sol: &PowerFlowSolution<f64>) -> f64 {
        let m = self.opts.margin;
        let mut s = 0.0;
        for (b, &v) in net.buses.iter().zip(&sol.v_mag) {
            let e = (v - (b.v_max - m)).max(0.0) + ((b.v_min + m) - v).max(0.0);
            s += e * e;
        }
        for (br, fl) in net.branches.iter().zip(&sol.branch_flows) {
            if br.rating > 0.0 {
                let e = (fl.s_max() - br.rating).max(0.0);
                s += e * e;
            }
        }
        self.opts.rho * s
    }

    /// Penalized losses, infinite when the power flow fails.
    fn objective(&self, positions: &[u32], x: &[(f64, f64)]) -> f64 {
        let net = self.network(positions, x);
        match solve_meshed(&net, &SolverOptions::newton()) {
            Ok(sol) => sol.losses_total + self.penalty(&net, &sol),
            Err(e) => {
                log::debug!("candidate skipped: {e}");
                f64::INFINITY
            }
        }
    }
}

fn project(x: &[(f64, f64)], boxes: &[[f64; 4]]) -> Vec<(f64, f64)> {
    x.iter().zip(boxes).map(|(&(p, q), b)| (p.clamp(b[0], b[1]), q.clamp(b[2], b[3]))).collect()
}

/// Optimizes one area. `reports` holds one report per area feeder in the
/// area's feeder order.
pub fn ems_optimize(
    grid: &GridModel,
    area: &EmsArea,
    state: &NetworkState,
    controls: &ControlVector,
    reports: &[FlexibilityReport],
    stale_reports: bool,
    opts: &EmsOptions,
) -> Result<EmsDecision, EmsError> {
    let mut model = AreaModel::build(grid, area, state, controls);
    model.opts = opts.clone();
    let mut boxes = Vec::with_capacity(area.feeders.len());
    let mut forecasts = Vec::with_capacity(area.feeders.len());
    let mut area_reports = Vec::with_capacity(area.feeders.len());
    for &f in &area.feeders {
        let id = &grid.feeders[f].id;
        let r = reports.iter().find(|r| &r.feeder == id).ok_or_else(|| EmsError::MissingReport(id.clone()))?;
        if !(r.p_min <= r.p_max && r.q_min <= r.q_max) {
            return Err(EmsError::EmptyBox { feeder: id.clone() });
        }
        boxes.push([r.p_min, r.p_max, r.q_min, r.q_max]);
        forecasts.push((r.p_forecast, r.q_forecast));
        area_reports.push(r);
    }

    let mut positions: Vec<u32> = model
        .devices
        .iter()
        .map(|(_, d)| match d {
            Device::Tap { grid_branch, changer, .. } => controls.taps[*grid_branch].unwrap_or(changer.position),
            Device::Cap { grid_cap, .. } => controls.caps[*grid_cap],
        })
        .collect();
    let mut x = project(&forecasts, &boxes);
    let mut best = model.objective(&positions, &x);
    if !best.is_finite() {
        // Any convergent discrete setting will do as a start.
        for (k, (_, dev)) in model.devices.iter().enumerate() {
            for pos in 0..dev.positions() {
                let mut trial = positions.clone();
                trial[k] = pos;
                let o = model.objective(&trial, &x);
                if o.is_finite() {
                    positions = trial;
                    best = o;
                    break;
                }
            }
            if best.is_finite() {
                break;
            }
        }
        if !best.is_finite() {
            return Err(EmsError::NoConvergence);
        }
    }

    for _ in 0..opts.outer_rounds.max(1) {
        let round_start = best;
        for k in 0..model.devices.len() {
            let count = model.devices[k].1.positions();
            let scores: Vec<f64> = (0..count)
                .into_par_iter()
                .map(|pos| {
                    let mut trial = positions.clone();
                    trial[k] = pos;
                    model.objective(&trial, &x)
                })
                .collect();
            for (pos, &o) in scores.iter().enumerate() {
                if o < best {
                    best = o;
                    positions[k] = pos as u32;
                }
            }
        }
        let (nx, no) = projected_gradient(&model, &positions, x, best, &boxes, opts);
        x = nx;
        best = no;
        if round_start - best <= opts.tolerance {
            break;
        }
    }

    let net = model.network(&positions, &x);
    let sol = solve_meshed(&net, &SolverOptions::newton()).map_err(|_| EmsError::NoConvergence)?;
    let predicted_violations = total_violations(&sol, &net);
    let rating_excess: f64 = net
        .branches
        .iter()
        .zip(&sol.branch_flows)
        .filter(|(b, _)| b.rating > 0.0)
        .map(|(b, f)| (f.s_max() - b.rating).max(0.0))
        .sum();

    let requests = area
        .feeders
        .iter()
        .zip(&x)
        .zip(&area_reports)
        .zip(&model.heads)
        .map(|(((&f, &(p, q)), r), &h)| {
            let (curt, dr) = curtailment_and_dr(p - r.p_forecast, r);
            OperatingPointRequest {
                feeder: grid.feeders[f].id.clone(),
                interval: state.interval,
                substation_voltage_setpoint: sol.v_mag[h],
                p_request: p,
                q_request: q,
                pv_curtailment_request: curt,
                dr_request: dr,
            }
        })
        .collect();
    let mut taps = Vec::new();
    let mut capacitors = Vec::new();
    for ((id, dev), &pos) in model.devices.iter().zip(&positions) {
        match dev {
            Device::Tap { .. } => taps.push(TapSetting { id: id.clone(), position: pos }),
            Device::Cap { .. } => capacitors.push(CapacitorSetting { id: id.clone(), state: pos }),
        }
    }
    Ok(EmsDecision {
        interval: state.interval,
        taps,
        capacitors,
        requests,
        predicted_losses: sol.losses_total,
        feasible: predicted_violations.is_empty() && rating_excess == 0.0,
        predicted_violations,
        rating_excess,
        stale_reports,
    })
}

fn projected_gradient(
    model: &AreaModel,
    positions: &[u32],
    mut x: Vec<(f64, f64)>,
    mut fx: f64,
    boxes: &[[f64; 4]],
    opts: &EmsOptions,
) -> (Vec<(f64, f64)>, f64) {
    let free: Vec<(usize, bool)> = boxes
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            let mut v = Vec::new();
            if b[1] > b[0] {
                v.push((i, false));
            }
            if b[3] > b[2] {
                v.push((i, true));
            }
            v
        })
        .collect();
    if free.is_empty() {
        return (x, fx);
    }
    let h = opts.fd_step;
    let mut alpha = 1.0;
    for _ in 0..opts.max_iterations {
        let grads: Vec<f64> = free
            .par_iter()
            .map(|&(i, is_q)| {
                let shifted = |d: f64| {
                    let mut y = x.clone();
                    if is_q {
                        y[i].1 += d;
                    } else {
                        y[i].0 += d;
                    }
                    model.objective(positions, &y)
                };
                let g = (shifted(h) - shifted(-h)) / (2.0 * h);
                if g.is_finite() {
                    g
                } else {
                    0.0
                }
            })
            .collect();
        if grads.iter().all(|&g| g == 0.0) {
            break;
        }
        let mut accepted = None;
        while alpha > 1e-14 {
            let mut y = x.clone();
            for (&(i, is_q), &g) in free.iter().zip(&grads) {
                if is_q {
                    y[i].1 -= alpha * g;
                } else {
                    y[i].0 -= alpha * g;
                }
            }
            let y = project(&y, boxes);
            if y == x {
                break;
            }
            let fy = model.objective(positions, &y);
            if fy < fx {
                accepted = Some((y, fy));
                break;
            }
            alpha *= 0.5;
        }
        let Some((y, fy)) = accepted else { break };
        let gain = fx - fy;
        x = y;
        fx = fy;
        if gain <= opts.tolerance {
            break;
        }
        alpha *= 2.0;
    }
    (x, fx)
}
