use num_complex::Complex;

use super::{finish, Admittance, PowerFlowError, PowerFlowSolution, SolverOptions};
use crate::linalg::{Lu, Matrix};
use crate::model::BusKind;
use crate::network::Network;
use crate::scalar::Scalar;

/// Polar Newton–Raphson from a flat start (slack/PV magnitudes held, all
/// other buses at 1.0, angles at the slack angle or zero).
pub fn solve_meshed<T: Scalar>(
    net: &Network<T>,
    opts: &SolverOptions<T>,
) -> Result<PowerFlowSolution<T>, PowerFlowError> {
    let n = net.len();
    let slack_count = net.slack_buses().count();
    if slack_count == 0 {
        return Err(PowerFlowError::SlackCount {
            expected: "at least one",
            found: 0,
        });
    }
    let ybus = Admittance::build(net);

    // Unknown layout: angles of every non-slack bus, then magnitudes of PQ buses.
    let ang_vars: Vec<usize> = (0..n).filter(|&i| net.buses[i].kind != BusKind::Slack).collect();
    let mag_vars: Vec<usize> = (0..n).filter(|&i| net.buses[i].kind == BusKind::Pq).collect();
    let mut ang_col = vec![usize::MAX; n];
    let mut mag_col = vec![usize::MAX; n];
    for (k, &i) in ang_vars.iter().enumerate() {
        ang_col[i] = k;
    }
    for (k, &i) in mag_vars.iter().enumerate() {
        mag_col[i] = ang_vars.len() + k;
    }
    let dim = ang_vars.len() + mag_vars.len();
    let var_bus = |col: usize| -> usize {
        if col < ang_vars.len() {
            ang_vars[col]
        } else {
            mag_vars[col - ang_vars.len()]
        }
    };

    let slack_angle = net
        .slack_buses()
        .next()
        .map_or(T::zero(), |s| net.buses[s].theta_set);
    let mut vm: Vec<T> = net
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Pq { T::one() } else { b.v_set })
        .collect();
    let mut va: Vec<T> = net
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Slack { b.theta_set } else { slack_angle })
        .collect();

    let mut iterations = 0;
    loop {
        let v: Vec<Complex<T>> = vm
            .iter()
            .zip(&va)
            .map(|(&m, &a)| Complex::from_polar(m, a))
            .collect();
        let s = ybus.injections(&v);
        let mut mismatch = vec![T::zero(); dim];
        for &i in &ang_vars {
            mismatch[ang_col[i]] = net.buses[i].p_inj - s[i].re;
        }
        for &i in &mag_vars {
            mismatch[mag_col[i]] = net.buses[i].q_inj - s[i].im;
        }
        let worst = mismatch.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        if worst.is_nan() {
            return Err(PowerFlowError::NonConvergence {
                iterations,
                mismatch: f64::NAN,
            });
        }
        if worst <= opts.tolerance {
            return Ok(finish(net, &ybus, &v, iterations));
        }
        if iterations >= opts.max_iterations {
            return Err(PowerFlowError::NonConvergence {
                iterations,
                mismatch: worst.to_f64_lossy(),
            });
        }

        let mut jac = Matrix::zeros(dim, dim);
        for &i in ang_vars.iter() {
            let (p_i, q_i) = (s[i].re, s[i].im);
            let is_pq = net.buses[i].kind == BusKind::Pq;
            for &(j, y) in &ybus.rows[i] {
                let (g, b) = (y.re, y.im);
                if i == j {
                    let v2 = vm[i] * vm[i];
                    jac.add_to(ang_col[i], ang_col[i], -q_i - b * v2);
                    if is_pq {
                        jac.add_to(ang_col[i], mag_col[i], p_i / vm[i] + g * vm[i]);
                        jac.add_to(mag_col[i], ang_col[i], p_i - g * v2);
                        jac.add_to(mag_col[i], mag_col[i], q_i / vm[i] - b * vm[i]);
                    }
                    continue;
                }
                let th = va[i] - va[j];
                let (sin, cos) = th.sin_cos();
                let gc_bs = g * cos + b * sin;
                let gs_bc = g * sin - b * cos;
                let j_kind = net.buses[j].kind;
                if j_kind != BusKind::Slack {
                    jac.add_to(ang_col[i], ang_col[j], vm[i] * vm[j] * gs_bc);
                    if is_pq {
                        jac.add_to(mag_col[i], ang_col[j], -vm[i] * vm[j] * gc_bs);
                    }
                }
                if j_kind == BusKind::Pq {
                    jac.add_to(ang_col[i], mag_col[j], vm[i] * gc_bs);
                    if is_pq {
                        jac.add_to(mag_col[i], mag_col[j], vm[i] * gs_bc);
                    }
                }
            }
        }

        let lu = Lu::factor(&jac).map_err(|e| PowerFlowError::SingularJacobian {
            bus: net.bus_ids[var_bus(e.column)].clone(),
        })?;
        let dx = lu.solve(&mismatch);
        for &i in &ang_vars {
            va[i] += dx[ang_col[i]];
        }
        for &i in &mag_vars {
            vm[i] += dx[mag_col[i]];
        }
        iterations += 1;
    }
}
