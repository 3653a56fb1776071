//! Independent reference computations shared by the integration suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tdvvc::dms::{dms_network, DmsOptions, FlexibilityReport, OperatingPointRequest, DmsController};
use tdvvc::model::{ControlVector, DerSetpoint, GridModel, NetworkState};
use tdvvc::network::{subtransmission_network, Network};
use tdvvc::powerflow::{solve_meshed, solve_radial, total_violations, SolverOptions};
use tdvvc::VlsMatrix;

/// Closed-form receiving voltage of a line feeding a constant-power load
/// from a 1.0 pu source.
pub fn two_bus_oracle(r: f64, x: f64, p: f64, q: f64) -> f64 {
    let b = 2.0 * (r * p + x * q) - 1.0;
    let c = (r * r + x * x) * (p * p + q * q);
    ((-b + (b * b - 4.0 * c).sqrt()) / 2.0).sqrt()
}

/// Re-solved voltage change of the feeder buses for injection changes.
pub fn actual_dv(net: &Network<f64>, base: &[f64], dp: &[f64], dq: &[f64]) -> Vec<f64> {
    let mut n = net.clone();
    for i in 0..dp.len() {
        n.buses[i + 1].p_inj += dp[i];
        n.buses[i + 1].q_inj += dq[i];
    }
    let sol = solve_meshed(&n, &SolverOptions::newton()).unwrap();
    sol.v_mag[1..].iter().zip(base).map(|(a, b)| a - b).collect()
}

pub fn head_import(grid: &GridModel, fi: usize, state: &NetworkState, controls: &ControlVector, head_v: f64) -> (f64, f64, Vec<f64>) {
    let net = dms_network(grid, fi, state, controls, head_v);
    let sol = solve_radial(&net, &SolverOptions::sweep()).unwrap();
    (sol.p_inj[0], sol.q_inj[0], sol.v_mag)
}

pub fn request(grid: &GridModel, fi: usize, head_v: f64, p: f64, q: f64) -> OperatingPointRequest {
    OperatingPointRequest {
        feeder: grid.feeders[fi].id.clone(),
        interval: 0,
        substation_voltage_setpoint: head_v,
        p_request: p,
        q_request: q,
        pv_curtailment_request: 0.0,
        dr_request: 0.0,
    }
}

pub fn effective(grid: &GridModel, fi: usize, state: &NetworkState, sp: &[DerSetpoint]) -> Vec<(f64, f64)> {
    grid.feeders[fi]
        .ders
        .iter()
        .zip(sp)
        .zip(&state.feeders[fi].p_avail)
        .map(|((d, &s), &a)| d.effective_injection(s, a))
        .collect()
}

/// Independent evaluation of the dispatch objective on the linear model for
/// one candidate: capacitor state and DER reactive powers.
pub fn oracle_objective(
    grid: &GridModel,
    state: &NetworkState,
    m: &tdvvc::VlsMatrix,
    opts: &DmsOptions,
    req: &OperatingPointRequest,
    cap_state: u32,
    q: &[f64],
) -> f64 {
    let f = &grid.feeders[0];
    let v0 = m.base_voltages();
    let (mut p, mut qh) = m.base_head();
    let mut v = v0.to_vec();
    let c = &f.capacitors[0];
    let cb = f.bus_index(&c.bus).unwrap();
    let dq_cap = c.q_step * v0[cb] * v0[cb] * f64::from(cap_state);
    for (i, vi) in v.iter_mut().enumerate() {
        *vi += m.s_q.get(i, cb) * dq_cap;
    }
    p += m.head.p_by_q[cb] * dq_cap;
    qh += m.head.q_by_q[cb] * dq_cap;
    let mut cost = 0.0;
    for (d, der) in f.ders.iter().enumerate() {
        let b = f.bus_index(&der.bus).unwrap();
        let (p_eff, q_base) = der.effective_injection(DerSetpoint { p: der.p_set, q: der.q_set }, state.feeders[0].p_avail[d]);
        cost += der.dr_cost * (p_eff - der.p_reference(state.feeders[0].p_avail[d])).abs();
        let dq = q[d] - q_base;
        for (i, vi) in v.iter_mut().enumerate() {
            *vi += m.s_q.get(i, b) * dq;
        }
        p += m.head.p_by_q[b] * dq;
        qh += m.head.q_by_q[b] * dq;
    }
    let mut j = cost + opts.rho_track * ((p - req.p_request).powi(2) + (qh - req.q_request).powi(2));
    for (i, &vi) in v.iter().enumerate() {
        let bus = &f.buses[i];
        let (lo, hi) = (bus.v_min + opts.margin, bus.v_max - opts.margin);
        let e = if vi > hi { vi - hi } else if vi < lo { lo - vi } else { 0.0 };
        j += opts.w_v * (vi - opts.v_ref).powi(2) + opts.rho_volt * e * e;
    }
    j
}

/// Random DER setpoints inside their capability.
pub fn random_setpoints(grid: &GridModel, fi: usize, state: &NetworkState, rng: &mut ChaCha8Rng) -> Vec<DerSetpoint> {
    grid.feeders[fi]
        .ders
        .iter()
        .zip(&state.feeders[fi].p_avail)
        .map(|(d, &a)| {
            let (lo, hi) = d.p_range(a);
            let p = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let cap = d.q_capability(p);
            let q = if cap > 0.0 { rng.random_range(-cap..=cap) } else { 0.0 };
            DerSetpoint { p, q }
        })
        .collect()
}

/// A head import produced by some capability-respecting setting whose
/// voltages clear the controller's internal margin.
pub fn reachable_request(grid: &GridModel, fi: usize, state: &NetworkState, rng: &mut ChaCha8Rng) -> Option<OperatingPointRequest> {
    let head_v = rng.random_range(0.98..=1.02);
    let mut c = ControlVector::initial(grid);
    c.feeders[fi].ders = random_setpoints(grid, fi, state, rng);
    let net = dms_network(grid, fi, state, &c, head_v);
    let sol = solve_radial(&net, &SolverOptions::sweep()).ok()?;
    let margin = DmsOptions::default().margin;
    let inside = (1..net.len()).all(|i| {
        let b = &net.buses[i];
        sol.v_mag[i] <= b.v_max - margin && sol.v_mag[i] >= b.v_min + margin
    });
    inside.then(|| request(grid, fi, head_v, sol.p_inj[0], sol.q_inj[0]))
}

/// Sub-transmission losses and feasibility at given controls and imports.
pub fn evaluate(grid: &GridModel, state: &NetworkState, controls: &ControlVector, imports: &[(f64, f64)]) -> Option<(f64, bool)> {
    let net = subtransmission_network(grid, state, controls, imports);
    let sol = solve_meshed(&net, &SolverOptions::newton()).ok()?;
    let rated = sol.branch_flows.iter().zip(&net.branches).all(|(f, b)| f.s_max() <= b.rating);
    Some((sol.losses_total, total_violations(&sol, &net).is_empty() && rated))
}

pub fn boxed(report: &FlexibilityReport, half_width: f64) -> FlexibilityReport {
    FlexibilityReport {
        p_min: report.p_forecast - half_width,
        p_max: report.p_forecast + half_width,
        q_min: report.q_forecast - half_width,
        q_max: report.q_forecast + half_width,
        ..report.clone()
    }
}

pub fn reports(grid: &GridModel, state: &NetworkState, controls: &ControlVector, half_width: f64) -> Vec<FlexibilityReport> {
    (0..grid.feeders.len())
        .map(|fi| {
            let r = DmsController::new(fi).report(grid, state, controls, 1.0).unwrap();
            boxed(&FlexibilityReport::point(&r.feeder, r.interval, r.p_forecast, r.q_forecast), half_width)
        })
        .collect()
}

/// Exhaustive search over every tap position and an 11 x 11 grid of the
/// feeder box; minimum losses over feasible points.
pub fn brute_force(grid: &GridModel, state: &NetworkState, controls: &ControlVector, r: &FlexibilityReport) -> (f64, usize) {
    let tap = grid.branches.iter().position(|b| b.tap.is_some()).unwrap();
    let positions = grid.branches[tap].tap.as_ref().unwrap().positions();
    let step = |lo: f64, hi: f64, k: usize| lo + (hi - lo) * k as f64 / 10.0;
    let mut best = f64::INFINITY;
    let mut solves = 0;
    for pos in 0..positions {
        let mut c = controls.clone();
        c.taps[tap] = Some(pos);
        for i in 0..=10 {
            for j in 0..=10 {
                let imports = [(step(r.p_min, r.p_max, i), step(r.q_min, r.q_max, j))];
                solves += 1;
                if let Some((loss, true)) = evaluate(grid, state, &c, &imports) {
                    best = best.min(loss);
                }
            }
        }
    }
    (best, solves)
}

/// Best of every capacitor state and every combination of `levels`
/// reactive setpoints per DER on the first feeder's linear model. Returns
/// (objective, capacitor state, reactive setpoints, candidates tried).
pub fn dms_exhaustive(
    grid: &GridModel,
    state: &NetworkState,
    m: &VlsMatrix,
    opts: &DmsOptions,
    req: &OperatingPointRequest,
    levels: usize,
) -> (f64, u32, Vec<f64>, usize) {
    let f = &grid.feeders[0];
    let grids: Vec<Vec<f64>> = f
        .ders
        .iter()
        .enumerate()
        .map(|(d, der)| {
            let (p, _) = der.effective_injection(DerSetpoint { p: der.p_set, q: 0.0 }, state.feeders[0].p_avail[d]);
            let cap = der.q_capability(p);
            (0..levels).map(|k| -cap + 2.0 * cap * k as f64 / (levels - 1) as f64).collect()
        })
        .collect();
    let mut best = (f64::INFINITY, 0, Vec::new(), 0);
    for c in 0..=f.capacitors[0].n_steps {
        let mut idx = vec![0usize; grids.len()];
        loop {
            let q: Vec<f64> = idx.iter().zip(&grids).map(|(&k, g)| g[k]).collect();
            best.3 += 1;
            let j = oracle_objective(grid, state, m, opts, req, c, &q);
            if j < best.0 {
                best = (j, c, q, best.3);
            }
            let mut d = 0;
            while d < idx.len() {
                idx[d] += 1;
                if idx[d] < levels {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == idx.len() {
                break;
            }
        }
    }
    best
}
