//! Distribution-side controller: disaggregates the EMS operating-point
//! request to DERs and capacitors, reports feeder flexibility, and writes
//! dispatch plans into the control vector.
//!
//! Continuous DER settings are optimized on the VLSM linearization by
//! proximal projected gradient. The objective is
//!
//! ```text
//! J = Σ_d c_d |p_d − p_ref,d|  +  w_v Σ_i (V̂_i − V_ref)²
//!   + ρ_t [(P̂ − P*)² + (Q̂ − Q*)²]  +  ρ_v Σ_i excess_i²
//! ```
//!
//! where `excess_i` is the distance of `V̂_i` outside its bounds tightened by
//! a per-bus margin. An outer loop re-solves the nonlinear feeder, shifts the
//! internal head targets by the observed tracking error and widens the
//! margin of any bus that still violates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ControlVector, DerKind, DerSetpoint, FeederModel, GridModel, NetworkState};
use crate::network::{feeder_network, Network};
use crate::powerflow::{solve_radial, PowerFlowError, PowerFlowSolution, SolverOptions};
use crate::vlsm::{VlsMatrix, VlsmError, DEFAULT_PERTURBATION};

/// Head-power tracking tolerance, per-unit.
pub const EPS_TRACK: f64 = 1e-3;

/// Per-DER (p, q) injections.
type Injections = Vec<(f64, f64)>;

/// DER injections, capacitor steps and linear-model objective.
type Candidate = (Injections, Vec<u32>, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointRequest {
    pub feeder: String,
    pub interval: usize,
    pub substation_voltage_setpoint: f64,
    /// Feeder-head real power import target.
    pub p_request: f64,
    /// Feeder-head reactive power import target.
    pub q_request: f64,
    pub pv_curtailment_request: f64,
    pub dr_request: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerDispatch {
    pub id: String,
    pub p_set: f64,
    pub q_set: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitorSetting {
    pub id: String,
    pub state: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub feeder: String,
    pub interval: usize,
    pub ders: Vec<DerDispatch>,
    pub capacitors: Vec<CapacitorSetting>,
    /// Objective on the linear model, evaluated at the request targets.
    pub objective_value: f64,
    /// No voltage violation in the nonlinear re-solve of the plan.
    pub feasible: bool,
    pub achieved_p: f64,
    pub achieved_q: f64,
}

/// Feeder-level operating envelope for the next interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityReport {
    pub feeder: String,
    pub interval: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p_forecast: f64,
    pub q_forecast: f64,
    /// PV output that could still be curtailed.
    pub pv_curtailable: f64,
    /// Import increase available from storage and controllable loads.
    pub dr_up: f64,
    /// Import decrease available from storage and controllable loads.
    pub dr_down: f64,
}

impl FlexibilityReport {
    /// Zero-width report at an observed import.
    pub fn point(feeder: &str, interval: usize, p: f64, q: f64) -> Self {
        Self {
            feeder: feeder.to_owned(),
            interval,
            p_min: p,
            p_max: p,
            q_min: q,
            q_max: q,
            p_forecast: p,
            q_forecast: q,
            pv_curtailable: 0.0,
            dr_up: 0.0,
            dr_down: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DmsError {
    #[error("request for feeder {got} sent to controller of {expected}")]
    WrongFeeder { expected: String, got: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("sensitivity matrix of feeder {0} was computed at a different base point")]
    StaleSensitivity(String),
    #[error("power flow: {0}")]
    PowerFlow(#[from] PowerFlowError),
    #[error("sensitivity: {0}")]
    Vlsm(#[from] VlsmError),
    #[error("{device}: {reason}")]
    Capability { device: String, reason: String },
    #[error("discrete search over {0} combinations is too large")]
    SearchTooLarge(u128),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DispatchMode {
    /// Projected-gradient DER settings, outer nonlinear correction.
    Continuous,
    /// DER reactive power restricted to `q_levels` evenly spaced values over
    /// its capability at the base real power; real power held. Pure
    /// enumeration on the linear model.
    Discrete { q_levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmsOptions {
    pub w_v: f64,
    pub v_ref: f64,
    pub rho_track: f64,
    pub rho_volt: f64,
    /// Internal tightening of every voltage bound.
    pub margin: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Largest capacitor combination count searched exhaustively.
    pub enumeration_limit: u128,
    pub outer_rounds: usize,
    pub bisection_steps: usize,
    pub mode: DispatchMode,
}

impl Default for DmsOptions {
    fn default() -> Self {
        Self {
            w_v: 1.0,
            v_ref: 1.0,
            rho_track: 1e4,
            rho_volt: 1e6,
            margin: 0.002,
            max_iterations: 500,
            tolerance: 1e-7,
            enumeration_limit: 64,
            outer_rounds: 8,
            bisection_steps: 30,
            mode: DispatchMode::Continuous,
        }
    }
}

/// Feeder network as seen by a DMS holding the head at `head_v`.
pub fn dms_network(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    head_v: f64,
) -> Network<f64> {
    feeder_network(grid, fi, state, controls, head_v)
}

/// Sensitivity matrix of feeder `fi` at its current operating point.
pub fn compute_vlsm(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    head_v: f64,
) -> Result<VlsMatrix<f64>, VlsmError> {
    let net = dms_network(grid, fi, state, controls, head_v);
    VlsMatrix::compute(&grid.feeders[fi].id, &net, DEFAULT_PERTURBATION)
}

#[derive(Debug, Clone)]
struct DerVar {
    kind: DerKind,
    p0: f64,
    q0: f64,
    p_lo: f64,
    p_hi: f64,
    p_ref: f64,
    cost: f64,
    s_rating: f64,
    supports_q: bool,
    /// Sensitivity columns of the DER's bus.
    a: Vec<f64>,
    g: Vec<f64>,
    head: [f64; 4],
}

impl DerVar {
    fn q_cap(&self, p: f64) -> f64 {
        if self.supports_q {
            (self.s_rating * self.s_rating - p * p).max(0.0).sqrt()
        } else {
            0.0
        }
    }

    /// Euclidean projection onto the strip `[p_lo, p_hi]` intersected with
    /// the capability disc.
    fn project(&self, p: f64, q: f64) -> (f64, f64) {
        if !self.supports_q {
            return (p.clamp(self.p_lo, self.p_hi), 0.0);
        }
        let r = p.hypot(q);
        if r > self.s_rating {
            let k = self.s_rating / r;
            if (self.p_lo..=self.p_hi).contains(&(p * k)) {
                return (p * k, q * k);
            }
        }
        let pc = p.clamp(self.p_lo, self.p_hi);
        let qc = self.q_cap(pc);
        (pc, q.clamp(-qc, qc))
    }
}

#[derive(Debug, Clone)]
struct CapVar {
    n_steps: u32,
    c0: u32,
    /// Voltage and head response to one step.
    dv: Vec<f64>,
    dhead: [f64; 2],
}

/// The DMS problem linearized at a VLSM base point.
#[derive(Debug, Clone)]
struct LinearFeeder {
    v0: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    p0: f64,
    q0: f64,
    ders: Vec<DerVar>,
    caps: Vec<CapVar>,
}

#[derive(Debug, Clone, Copy)]
struct Targets {
    p: f64,
    q: f64,
}

struct Eval {
    j: f64,
    v: Vec<f64>,
    p: f64,
    q: f64,
}

impl LinearFeeder {
    fn build(feeder: &FeederModel, fs_p_avail: &[f64], controls: &crate::model::FeederControls, m: &VlsMatrix<f64>) -> Self {
        let n = m.dim();
        let v0 = m.base_voltages().to_vec();
        let (p0, q0) = m.base_head();
        let bus_of = |id: &str| feeder.bus_index(id);
        let ders = feeder
            .ders
            .iter()
            .enumerate()
            .filter_map(|(d, der)| {
                let b = bus_of(&der.bus)?;
                let p_avail = fs_p_avail[d];
                let (p, q) = der.effective_injection(controls.ders[d], p_avail);
                let (p_lo, p_hi) = der.p_range(p_avail);
                Some(DerVar {
                    kind: der.kind,
                    p0: p,
                    q0: q,
                    p_lo,
                    p_hi,
                    p_ref: der.p_reference(p_avail),
                    cost: der.dr_cost,
                    s_rating: der.s_rating,
                    supports_q: der.supports_q(),
                    a: m.s_p.column(b),
                    g: m.s_q.column(b),
                    head: [m.head.p_by_p[b], m.head.p_by_q[b], m.head.q_by_p[b], m.head.q_by_q[b]],
                })
            })
            .collect();
        let caps = feeder
            .capacitors
            .iter()
            .zip(&controls.caps)
            .map(|(c, &st)| {
                let b = bus_of(&c.bus).expect("validated capacitor bus");
                let dq = c.q_step * v0[b] * v0[b];
                CapVar {
                    n_steps: c.n_steps,
                    c0: st,
                    dv: m.s_q.column(b).into_iter().map(|s| s * dq).collect(),
                    dhead: [m.head.p_by_q[b] * dq, m.head.q_by_q[b] * dq],
                }
            })
            .collect();
        let net = &m.base_network;
        Self {
            lo: (1..=n).map(|i| net.buses[i].v_min).collect(),
            hi: (1..=n).map(|i| net.buses[i].v_max).collect(),
            v0,
            p0,
            q0,
            ders,
            caps,
        }
    }

    /// Voltage and head prediction with capacitor offsets folded in.
    fn predict(&self, x: &[(f64, f64)], caps: &[u32]) -> (Vec<f64>, f64, f64) {
        let mut v = self.v0.clone();
        let (mut p, mut q) = (self.p0, self.q0);
        for (c, &st) in self.caps.iter().zip(caps) {
            let k = f64::from(st) - f64::from(c.c0);
            if k != 0.0 {
                for (vi, dv) in v.iter_mut().zip(&c.dv) {
                    *vi += k * dv;
                }
                p += k * c.dhead[0];
                q += k * c.dhead[1];
            }
        }
        for (d, &(pd, qd)) in self.ders.iter().zip(x) {
            let (dp, dq) = (pd - d.p0, qd - d.q0);
            if dp != 0.0 || dq != 0.0 {
                for ((vi, a), g) in v.iter_mut().zip(&d.a).zip(&d.g) {
                    *vi += a * dp + g * dq;
                }
                p += d.head[0] * dp + d.head[1] * dq;
                q += d.head[2] * dp + d.head[3] * dq;
            }
        }
        (v, p, q)
    }

    fn excess(&self, i: usize, v: f64, margins: &[f64]) -> f64 {
        let hi = self.hi[i] - margins[i];
        let lo = self.lo[i] + margins[i];
        if v > hi {
            v - hi
        } else if v < lo {
            v - lo
        } else {
            0.0
        }
    }

    fn cost(&self, x: &[(f64, f64)]) -> f64 {
        self.ders.iter().zip(x).map(|(d, &(p, _))| d.cost * (p - d.p_ref).abs()).sum()
    }

    fn evaluate(&self, o: &DmsOptions, x: &[(f64, f64)], caps: &[u32], t: Targets, margins: &[f64]) -> Eval {
        let (v, p, q) = self.predict(x, caps);
        let j = self.cost(x) + self.smooth(o, &v, p, q, t, margins);
        Eval { j, v, p, q }
    }

    fn smooth(&self, o: &DmsOptions, v: &[f64], p: f64, q: f64, t: Targets, margins: &[f64]) -> f64 {
        let mut s = o.rho_track * ((p - t.p).powi(2) + (q - t.q).powi(2));
        for (i, &vi) in v.iter().enumerate() {
            let e = self.excess(i, vi, margins);
            s += o.w_v * (vi - o.v_ref).powi(2) + o.rho_volt * e * e;
        }
        s
    }

    /// Gradient of the smooth part.
    fn gradient(&self, o: &DmsOptions, ev: &Eval, t: Targets, margins: &[f64]) -> Vec<(f64, f64)> {
        let r: Vec<f64> = ev
            .v
            .iter()
            .enumerate()
            .map(|(i, &vi)| 2.0 * o.w_v * (vi - o.v_ref) + 2.0 * o.rho_volt * self.excess(i, vi, margins))
            .collect();
        let ep = 2.0 * o.rho_track * (ev.p - t.p);
        let eq = 2.0 * o.rho_track * (ev.q - t.q);
        self.ders
            .iter()
            .map(|d| {
                let gp = dot(&d.a, &r) + ep * d.head[0] + eq * d.head[2];
                let gq = if d.supports_q { dot(&d.g, &r) + ep * d.head[1] + eq * d.head[3] } else { 0.0 };
                (gp, gq)
            })
            .collect()
    }

    /// Proximal step on the L1 cost followed by projection.
    fn step(&self, x: &[(f64, f64)], g: &[(f64, f64)], alpha: f64) -> Vec<(f64, f64)> {
        self.ders
            .iter()
            .zip(x.iter().zip(g))
            .map(|(d, (&(p, q), &(gp, gq)))| {
                let y = p - alpha * gp - d.p_ref;
                let shrink = alpha * d.cost;
                let p = d.p_ref + y.signum() * (y.abs() - shrink).max(0.0);
                d.project(p, q - alpha * gq)
            })
            .collect()
    }

    /// Proximal projected gradient with backtracking. Returns the solution
    /// and its objective.
    fn solve_continuous(
        &self,
        o: &DmsOptions,
        start: &[(f64, f64)],
        caps: &[u32],
        t: Targets,
        margins: &[f64],
    ) -> (Vec<(f64, f64)>, f64) {
        let mut x: Vec<(f64, f64)> = self.ders.iter().zip(start).map(|(d, &(p, q))| d.project(p, q)).collect();
        let mut ev = self.evaluate(o, &x, caps, t, margins);
        if self.ders.is_empty() {
            return (x, ev.j);
        }
        let mut alpha = 1e-3;
        for _ in 0..o.max_iterations {
            let g = self.gradient(o, &ev, t, margins);
            let f_x = ev.j - self.cost(&x);
            let mut accepted = None;
            while alpha > 1e-18 {
                let y = self.step(&x, &g, alpha);
                let ey = self.evaluate(o, &y, caps, t, margins);
                let f_y = ey.j - self.cost(&y);
                let (mut lin, mut sq) = (0.0, 0.0);
                for ((&(yp, yq), &(xp, xq)), &(gp, gq)) in y.iter().zip(&x).zip(&g) {
                    lin += gp * (yp - xp) + gq * (yq - xq);
                    sq += (yp - xp).powi(2) + (yq - xq).powi(2);
                }
                if f_y <= f_x + lin + sq / (2.0 * alpha) + 1e-15 && ey.j <= ev.j {
                    accepted = Some((y, ey));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((y, ey)) = accepted else { break };
            let gain = ev.j - ey.j;
            x = y;
            ev = ey;
            if gain <= o.tolerance {
                break;
            }
            alpha *= 2.0;
        }
        (x, ev.j)
    }

    fn base_point(&self) -> Vec<(f64, f64)> {
        self.ders.iter().map(|d| (d.p0, d.q0)).collect()
    }

    fn base_caps(&self) -> Vec<u32> {
        self.caps.iter().map(|c| c.c0).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Every assignment of `radix[k]` values per position, first position
/// varying slowest.
fn for_each_combination(radix: &[u32], mut f: impl FnMut(&[u32])) {
    let mut cur = vec![0u32; radix.len()];
    if radix.contains(&0) {
        return;
    }
    loop {
        f(&cur);
        let mut k = radix.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] < radix[k] {
                break;
            }
            cur[k] = 0;
        }
    }
}

fn check_request(feeder: &FeederModel, state_loads: &[(f64, f64)], req: &OperatingPointRequest) -> Result<(), DmsError> {
    if req.feeder != feeder.id {
        return Err(DmsError::WrongFeeder { expected: feeder.id.clone(), got: req.feeder.clone() });
    }
    let bad = |s: String| Err(DmsError::InvalidRequest(s));
    let vals = [
        req.substation_voltage_setpoint,
        req.p_request,
        req.q_request,
        req.pv_curtailment_request,
        req.dr_request,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return bad("non-finite field".into());
    }
    if !(0.8..=1.2).contains(&req.substation_voltage_setpoint) {
        return bad(format!("substation voltage {} outside [0.8, 1.2]", req.substation_voltage_setpoint));
    }
    if req.pv_curtailment_request < 0.0 || req.dr_request < 0.0 {
        return bad("negative curtailment or demand-response request".into());
    }
    let load: f64 = state_loads.iter().map(|(p, q)| p.abs() + q.abs()).sum();
    let ders: f64 = feeder.ders.iter().map(|d| d.s_rating).sum();
    let caps: f64 = feeder.capacitors.iter().map(|c| c.q_step * f64::from(c.n_steps)).sum();
    let bound = 2.0 * (load + ders + caps) + 1e-6;
    if req.p_request.abs() > bound || req.q_request.abs() > bound {
        return bad(format!("head power ({}, {}) beyond feeder capability {bound}", req.p_request, req.q_request));
    }
    let pv: f64 = feeder.ders.iter().filter(|d| d.kind == DerKind::PvInverter).map(|d| d.s_rating).sum();
    let dr: f64 = feeder.ders.iter().filter(|d| d.kind != DerKind::PvInverter).map(|d| d.s_rating).sum();
    if req.pv_curtailment_request > pv + 1e-9 {
        return bad(format!("curtailment {} beyond PV capability {pv}", req.pv_curtailment_request));
    }
    if req.dr_request > 2.0 * dr + 1e-9 {
        return bad(format!("demand response {} beyond capability {}", req.dr_request, 2.0 * dr));
    }
    Ok(())
}

/// Converts effective DER injections into setpoints. PV output at its
/// availability is written as an uncurtailed cap.
fn setpoints(feeder: &FeederModel, p_avail: &[f64], x: &[(f64, f64)]) -> Vec<DerSetpoint> {
    feeder
        .ders
        .iter()
        .zip(p_avail)
        .zip(x)
        .map(|((der, &avail), &(p, q))| {
            let p = match der.kind {
                DerKind::PvInverter if p >= avail.min(der.s_rating) - 1e-12 => der.s_rating.max(avail),
                _ => p,
            };
            DerSetpoint { p, q: if der.supports_q() { q } else { 0.0 } }
        })
        .collect()
}

fn with_feeder_settings(
    controls: &ControlVector,
    fi: usize,
    ders: Vec<DerSetpoint>,
    caps: &[u32],
) -> ControlVector {
    let mut c = controls.clone();
    c.feeders[fi].ders = ders;
    c.feeders[fi].caps = caps.to_vec();
    c
}

fn head_import(sol: &PowerFlowSolution<f64>) -> (f64, f64) {
    (sol.p_inj[0], sol.q_inj[0])
}

/// Bus `i` of the feeder (network node `i + 1`) sits outside its bounds.
fn violations(net: &Network<f64>, sol: &PowerFlowSolution<f64>) -> Vec<(usize, f64)> {
    (1..net.len())
        .filter_map(|k| {
            let b = &net.buses[k];
            let v = sol.v_mag[k];
            if v > b.v_max {
                Some((k - 1, v - b.v_max))
            } else if v < b.v_min {
                Some((k - 1, b.v_min - v))
            } else {
                None
            }
        })
        .collect()
}

/// Finds DER settings and capacitor states that track the request while
/// minimizing demand-response cost and voltage deviation.
#[allow(clippy::too_many_arguments)]
pub fn disaggregate(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    m: &VlsMatrix<f64>,
    req: &OperatingPointRequest,
    opts: &DmsOptions,
) -> Result<DispatchPlan, DmsError> {
    let feeder = &grid.feeders[fi];
    let fs = &state.feeders[fi];
    check_request(feeder, &fs.loads, req)?;
    let net = dms_network(grid, fi, state, controls, req.substation_voltage_setpoint);
    if !m.matches_base(&net) {
        return Err(DmsError::StaleSensitivity(feeder.id.clone()));
    }
    let lin = LinearFeeder::build(feeder, &fs.p_avail, &controls.feeders[fi], m);
    let n = m.dim();
    let requested = Targets { p: req.p_request, q: req.q_request };
    let base_margins = vec![opts.margin; n];

    let (x, caps) = match opts.mode {
        DispatchMode::Discrete { q_levels } => discrete_search(&lin, opts, q_levels, requested, &base_margins)?,
        DispatchMode::Continuous => continuous_search(grid, fi, state, controls, req, &lin, opts)?,
    };

    let objective_value = lin.evaluate(opts, &x, &caps, requested, &base_margins).j;
    let sps = setpoints(feeder, &fs.p_avail, &x);
    let trial = with_feeder_settings(controls, fi, sps.clone(), &caps);
    let tnet = dms_network(grid, fi, state, &trial, req.substation_voltage_setpoint);
    let sol = solve_radial(&tnet, &SolverOptions::sweep())?;
    let (achieved_p, achieved_q) = head_import(&sol);
    Ok(DispatchPlan {
        feeder: feeder.id.clone(),
        interval: req.interval,
        ders: feeder
            .ders
            .iter()
            .zip(&sps)
            .map(|(d, sp)| DerDispatch { id: d.id.clone(), p_set: sp.p, q_set: sp.q })
            .collect(),
        capacitors: feeder
            .capacitors
            .iter()
            .zip(&caps)
            .map(|(c, &state)| CapacitorSetting { id: c.id.clone(), state })
            .collect(),
        objective_value,
        feasible: violations(&tnet, &sol).is_empty(),
        achieved_p,
        achieved_q,
    })
}

fn discrete_search(
    lin: &LinearFeeder,
    opts: &DmsOptions,
    q_levels: usize,
    t: Targets,
    margins: &[f64],
) -> Result<(Injections, Vec<u32>), DmsError> {
    let levels = q_levels.max(1) as u32;
    let mut radix: Vec<u32> = lin.caps.iter().map(|c| c.n_steps + 1).collect();
    radix.extend(lin.ders.iter().map(|d| if d.supports_q { levels } else { 1 }));
    let total: u128 = radix.iter().map(|&r| u128::from(r)).product();
    if total > 10_000_000 {
        return Err(DmsError::SearchTooLarge(total));
    }
    let nc = lin.caps.len();
    let q_at = |d: &DerVar, k: u32| -> f64 {
        let cap = d.q_cap(d.p0);
        if levels == 1 {
            0.0
        } else {
            -cap + 2.0 * cap * f64::from(k) / f64::from(levels - 1)
        }
    };
    let mut best: Option<(f64, Injections, Vec<u32>)> = None;
    for_each_combination(&radix, |combo| {
        let caps = combo[..nc].to_vec();
        let x: Vec<(f64, f64)> = lin
            .ders
            .iter()
            .zip(&combo[nc..])
            .map(|(d, &k)| (d.p0, if d.supports_q { q_at(d, k) } else { 0.0 }))
            .collect();
        let j = lin.evaluate(opts, &x, &caps, t, margins).j;
        if best.as_ref().is_none_or(|b| j < b.0) {
            best = Some((j, x, caps));
        }
    });
    let (_, x, caps) = best.expect("at least one combination");
    Ok((x, caps))
}

/// Capacitor candidates: exhaustive when small, otherwise greedy one device
/// at a time in id order.
fn best_over_capacitors(
    lin: &LinearFeeder,
    opts: &DmsOptions,
    t: Targets,
    margins: &[f64],
    start: &[(f64, f64)],
    cap_order: &[usize],
) -> Candidate {
    let radix: Vec<u32> = lin.caps.iter().map(|c| c.n_steps + 1).collect();
    let total: u128 = radix.iter().map(|&r| u128::from(r)).product();
    let mut best: Option<Candidate> = None;
    let consider = |caps: Vec<u32>, best: &mut Option<Candidate>| {
        let (x, j) = lin.solve_continuous(opts, start, &caps, t, margins);
        if best.as_ref().is_none_or(|b| j < b.2) {
            *best = Some((x, caps, j));
        }
    };
    if total <= opts.enumeration_limit {
        // Enumerate in id order so ties keep the lowest-id alternative.
        let ordered_radix: Vec<u32> = cap_order.iter().map(|&k| radix[k]).collect();
        for_each_combination(&ordered_radix, |combo| {
            let mut caps = vec![0; radix.len()];
            for (&k, &v) in cap_order.iter().zip(combo) {
                caps[k] = v;
            }
            consider(caps, &mut best);
        });
    } else {
        let mut caps = lin.base_caps();
        consider(caps.clone(), &mut best);
        loop {
            let before = best.as_ref().map(|b| b.2).unwrap_or(f64::INFINITY);
            for &k in cap_order {
                for s in 0..radix[k] {
                    let mut trial = caps.clone();
                    trial[k] = s;
                    consider(trial, &mut best);
                }
                caps = best.as_ref().expect("evaluated").1.clone();
            }
            if best.as_ref().map(|b| b.2).unwrap_or(f64::INFINITY) >= before {
                break;
            }
        }
    }
    best.expect("at least one capacitor combination")
}

fn continuous_search(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    req: &OperatingPointRequest,
    lin: &LinearFeeder,
    opts: &DmsOptions,
) -> Result<(Injections, Vec<u32>), DmsError> {
    let feeder = &grid.feeders[fi];
    let fs = &state.feeders[fi];
    let n = lin.v0.len();
    let mut cap_order: Vec<usize> = (0..feeder.capacitors.len()).collect();
    cap_order.sort_by(|&a, &b| feeder.capacitors[a].id.cmp(&feeder.capacitors[b].id));

    let mut t = Targets { p: req.p_request, q: req.q_request };
    let mut margins = vec![opts.margin; n];
    let mut start = lin.base_point();
    let mut best: Option<(Injections, Vec<u32>, f64, bool)> = None;
    for _ in 0..opts.outer_rounds.max(1) {
        let (x, caps, _) = best_over_capacitors(lin, opts, t, &margins, &start, &cap_order);
        let trial = with_feeder_settings(controls, fi, setpoints(feeder, &fs.p_avail, &x), &caps);
        let tnet = dms_network(grid, fi, state, &trial, req.substation_voltage_setpoint);
        let sol = match solve_radial(&tnet, &SolverOptions::sweep()) {
            Ok(s) => s,
            Err(e) => {
                log::debug!("feeder {}: candidate re-solve failed: {e}", feeder.id);
                break;
            }
        };
        let (ap, aq) = head_import(&sol);
        let err = (req.p_request - ap).abs().max((req.q_request - aq).abs());
        let viol = violations(&tnet, &sol);
        let ok = viol.is_empty();
        let better = match &best {
            None => true,
            Some((_, _, e, was_ok)) => (ok && !was_ok) || (ok == *was_ok && err < *e),
        };
        if better {
            best = Some((x.clone(), caps.clone(), err, ok));
        }
        if ok && err <= EPS_TRACK / 4.0 {
            break;
        }
        t.p += req.p_request - ap;
        t.q += req.q_request - aq;
        for (i, dev) in viol {
            margins[i] += dev + opts.margin / 2.0;
        }
        start = x;
    }
    match best {
        Some((x, caps, _, _)) => Ok((x, caps)),
        None => Ok((lin.base_point(), lin.base_caps())),
    }
}

/// Writes a plan's setpoints into a copy of `controls`, rejecting any
/// setpoint outside its device capability.
pub fn apply_plan(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    plan: &DispatchPlan,
) -> Result<ControlVector, DmsError> {
    let feeder = &grid.feeders[fi];
    let mut out = controls.clone();
    for dd in &plan.ders {
        let d = feeder
            .ders
            .iter()
            .position(|x| x.id == dd.id)
            .ok_or_else(|| DmsError::Capability { device: dd.id.clone(), reason: "unknown device".into() })?;
        let sp = DerSetpoint { p: dd.p_set, q: dd.q_set };
        feeder.ders[d]
            .check_setpoint(sp, state.feeders[fi].p_avail[d])
            .map_err(|reason| DmsError::Capability { device: dd.id.clone(), reason })?;
        out.feeders[fi].ders[d] = sp;
    }
    for cs in &plan.capacitors {
        let k = feeder
            .capacitors
            .iter()
            .position(|c| c.id == cs.id)
            .ok_or_else(|| DmsError::Capability { device: cs.id.clone(), reason: "unknown device".into() })?;
        let cap = &feeder.capacitors[k];
        if cs.state > cap.n_steps {
            return Err(DmsError::Capability {
                device: cs.id.clone(),
                reason: format!("state {} above {} steps", cs.state, cap.n_steps),
            });
        }
        out.feeders[fi].caps[k] = cs.state;
    }
    Ok(out)
}

/// Direction of a flexibility path.
#[derive(Clone, Copy)]
enum Extreme {
    PMax,
    PMin,
    QMax,
    QMin,
}

/// Feeder head operating envelope at `state` (normally the next interval's
/// snapshot) with the setpoints in `controls`, linearized by `m`.
pub fn compute_flexibility(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    m: &VlsMatrix<f64>,
    opts: &DmsOptions,
) -> Result<FlexibilityReport, DmsError> {
    let feeder = &grid.feeders[fi];
    let fs = &state.feeders[fi];
    let head_v = m.base_network.buses[0].v_set;
    let net = dms_network(grid, fi, state, controls, head_v);
    if !m.matches_base(&net) {
        return Err(DmsError::StaleSensitivity(feeder.id.clone()));
    }
    let lin = LinearFeeder::build(feeder, &fs.p_avail, &controls.feeders[fi], m);
    let (p_fc, q_fc) = m.base_head();
    let n = lin.v0.len();
    let caps = lin.base_caps();
    let margins = vec![opts.margin; n];

    // A voltage-feasible anchor: the base point, or the cheapest voltage
    // correction of it when the base violates.
    let feasible_lin = |x: &[(f64, f64)]| -> bool {
        let (v, _, _) = lin.predict(x, &caps);
        v.iter().enumerate().all(|(i, &vi)| lin.excess(i, vi, &margins) == 0.0)
    };
    let solve_at = |x: &[(f64, f64)]| -> Result<(PowerFlowSolution<f64>, bool), DmsError> {
        let c = with_feeder_settings(controls, fi, setpoints(feeder, &fs.p_avail, x), &caps);
        let tnet = dms_network(grid, fi, state, &c, head_v);
        let sol = solve_radial(&tnet, &SolverOptions::sweep())?;
        let ok = violations(&tnet, &sol).is_empty();
        Ok((sol, ok))
    };
    let mut anchor = lin.base_point();
    if !solve_at(&anchor)?.1 {
        let relaxed = DmsOptions { rho_track: 0.0, ..opts.clone() };
        let (x, _) = lin.solve_continuous(&relaxed, &anchor, &caps, Targets { p: p_fc, q: q_fc }, &margins);
        anchor = x;
    }
    let (anchor_sol, anchor_ok) = solve_at(&anchor)?;
    let (pa, qa) = head_import(&anchor_sol);

    let extreme = |e: Extreme| -> Vec<(f64, f64)> {
        lin.ders
            .iter()
            .zip(&anchor)
            .map(|(d, &(p, _))| match e {
                Extreme::PMax => {
                    let p = d.p_lo;
                    d.project(p, d.q_cap(p))
                }
                Extreme::PMin => {
                    let p = d.p_hi;
                    d.project(p, -d.q_cap(p))
                }
                Extreme::QMax => (p, -d.q_cap(p)),
                Extreme::QMin => (p, d.q_cap(p)),
            })
            .collect()
    };
    let lerp = |to: &[(f64, f64)], l: f64| -> Vec<(f64, f64)> {
        anchor
            .iter()
            .zip(to)
            .zip(&lin.ders)
            .map(|((&(p0, q0), &(p1, q1)), d)| d.project(p0 + l * (p1 - p0), q0 + l * (q1 - q0)))
            .collect()
    };

    let reach = |e: Extreme| -> Result<(f64, f64), DmsError> {
        if !anchor_ok || lin.ders.is_empty() {
            return Ok((pa, qa));
        }
        let to = extreme(e);
        let mut lam = 1.0;
        if !feasible_lin(&lerp(&to, 1.0)) {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..opts.bisection_steps {
                let mid = 0.5 * (lo + hi);
                if feasible_lin(&lerp(&to, mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lam = lo;
        }
        let (sol, ok) = solve_at(&lerp(&to, lam))?;
        if ok {
            return Ok(head_import(&sol));
        }
        let (mut lo, mut hi) = (0.0, lam);
        let mut best = (pa, qa);
        for _ in 0..opts.bisection_steps {
            let mid = 0.5 * (lo + hi);
            let (sol, ok) = solve_at(&lerp(&to, mid))?;
            if ok {
                lo = mid;
                best = head_import(&sol);
            } else {
                hi = mid;
            }
        }
        Ok(best)
    };
    let (p_hi, _) = reach(Extreme::PMax)?;
    let (p_lo, _) = reach(Extreme::PMin)?;
    let (_, q_hi) = reach(Extreme::QMax)?;
    let (_, q_lo) = reach(Extreme::QMin)?;
    let p_min = p_lo.min(pa).min(p_hi);
    let p_max = p_hi.max(pa).max(p_lo);
    let q_min = q_lo.min(qa).min(q_hi);
    let q_max = q_hi.max(qa).max(q_lo);

    let mut pv_curtailable = 0.0;
    let (mut dr_up, mut dr_down) = (0.0, 0.0);
    for (d, &(p, _)) in lin.ders.iter().zip(&anchor) {
        match d.kind {
            DerKind::PvInverter => pv_curtailable += p - d.p_lo,
            _ => {
                dr_up += p - d.p_lo;
                dr_down += d.p_hi - p;
            }
        }
    }
    Ok(FlexibilityReport {
        feeder: feeder.id.clone(),
        interval: state.interval,
        p_min,
        p_max,
        q_min,
        q_max,
        p_forecast: p_fc.clamp(p_min, p_max),
        q_forecast: q_fc.clamp(q_min, q_max),
        pv_curtailable,
        dr_up,
        dr_down,
    })
}

/// One distribution controller instance.
#[derive(Debug, Clone)]
pub struct DmsController {
    pub feeder_index: usize,
    pub options: DmsOptions,
}

/// Result of handling one request.
#[derive(Debug, Clone)]
pub struct DmsOutcome {
    pub plan: DispatchPlan,
    /// Control vector with the plan applied.
    pub controls: ControlVector,
}

impl DmsController {
    pub fn new(feeder_index: usize) -> Self {
        Self { feeder_index, options: DmsOptions::default() }
    }

    /// Linearizes at the requested head voltage, disaggregates and applies.
    pub fn handle(
        &self,
        grid: &GridModel,
        state: &NetworkState,
        controls: &ControlVector,
        req: &OperatingPointRequest,
    ) -> Result<DmsOutcome, DmsError> {
        let fi = self.feeder_index;
        let m = compute_vlsm(grid, fi, state, controls, req.substation_voltage_setpoint)?;
        let plan = disaggregate(grid, fi, state, controls, &m, req, &self.options)?;
        let controls = apply_plan(grid, fi, state, controls, &plan)?;
        Ok(DmsOutcome { plan, controls })
    }

    /// Flexibility for `next` (the coming interval's snapshot) at head
    /// voltage `head_v`.
    pub fn report(
        &self,
        grid: &GridModel,
        next: &NetworkState,
        controls: &ControlVector,
        head_v: f64,
    ) -> Result<FlexibilityReport, DmsError> {
        let fi = self.feeder_index;
        let m = compute_vlsm(grid, fi, next, controls, head_v)?;
        compute_flexibility(grid, fi, next, controls, &m, &self.options)
    }
}
