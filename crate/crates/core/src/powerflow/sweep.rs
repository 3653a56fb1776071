use std::collections::VecDeque;

use num_complex::Complex;

use super::{finish, Admittance, PowerFlowError, PowerFlowSolution, SolverOptions};
use crate::model::BusKind;
use crate::network::Network;
use crate::scalar::Scalar;

/// How a tree edge connects a node to its parent.
struct Edge<T> {
    parent: usize,
    /// Series impedance.
    z: Complex<T>,
    tap: T,
    /// True when the tap (the branch's `from` side) sits on the parent.
    tap_at_parent: bool,
}

/// Backward/forward sweep on a radial network whose single slack bus is
/// the root. Converges when no voltage moves more than the tolerance
/// between sweeps.
pub fn solve_radial<T: Scalar>(
    net: &Network<T>,
    opts: &SolverOptions<T>,
) -> Result<PowerFlowSolution<T>, PowerFlowError> {
    let n = net.len();
    let slacks: Vec<usize> = net.slack_buses().collect();
    if slacks.len() != 1 {
        return Err(PowerFlowError::SlackCount {
            expected: "exactly one",
            found: slacks.len(),
        });
    }
    let root = slacks[0];
    if let Some(i) = (0..n).find(|&i| net.buses[i].kind == BusKind::Pv) {
        return Err(PowerFlowError::Unsupported {
            what: "voltage-controlled buses",
            bus: net.bus_ids[i].clone(),
        });
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, br) in net.branches.iter().enumerate() {
        adj[br.from].push(k);
        adj[br.to].push(k);
    }
    let mut edge: Vec<Option<Edge<T>>> = (0..n).map(|_| None).collect();
    let mut order = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    // Shunt admittance seen at each node: capacitors plus branch charging halves.
    let mut y_node: Vec<Complex<T>> = net
        .buses
        .iter()
        .map(|b| Complex::new(T::zero(), b.shunt_b))
        .collect();
    let mut used = 0usize;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &k in &adj[u] {
            let br = &net.branches[k];
            let w = if br.from == u { br.to } else { br.from };
            if seen[w] {
                continue;
            }
            seen[w] = true;
            used += 1;
            let half_b = Complex::new(T::zero(), br.b / T::of(2.0));
            y_node[br.from] += half_b / (br.tap * br.tap);
            y_node[br.to] += half_b;
            edge[w] = Some(Edge {
                parent: u,
                z: Complex::new(br.r, br.x),
                tap: br.tap,
                tap_at_parent: br.from == u,
            });
            queue.push_back(w);
        }
    }
    if let Some(i) = (0..n).find(|&i| !seen[i]) {
        return Err(PowerFlowError::Disconnected {
            bus: net.bus_ids[i].clone(),
        });
    }
    if used != net.branches.len() {
        let closing = net
            .branches
            .iter()
            .position(|br| {
                !matches!(&edge[br.to], Some(e) if e.parent == br.from)
                    && !matches!(&edge[br.from], Some(e) if e.parent == br.to)
            })
            .unwrap_or(0);
        return Err(PowerFlowError::NotRadial {
            branch: net.branch_ids[closing].clone(),
        });
    }

    let rb = &net.buses[root];
    let v_root = Complex::from_polar(rb.v_set, rb.theta_set);
    let mut v = vec![v_root; n];
    let s_inj: Vec<Complex<T>> = net.buses.iter().map(|b| Complex::new(b.p_inj, b.q_inj)).collect();
    let zero = Complex::new(T::zero(), T::zero());
    let mut through = vec![zero; n];
    let mut drawn = vec![zero; n];
    let mut last_dv = f64::NAN;
    let ybus = Admittance::build(net);

    for sweep in 1..=opts.max_iterations {
        // Backward: current each subtree draws through its parent edge.
        drawn.iter_mut().for_each(|c| *c = zero);
        for &i in order.iter().rev() {
            let demand = y_node[i] * v[i] - (s_inj[i] / v[i]).conj();
            through[i] = demand + drawn[i];
            if let Some(e) = &edge[i] {
                let up = if e.tap_at_parent { through[i] / e.tap } else { through[i] * e.tap };
                drawn[e.parent] += up;
            }
        }
        // Forward: voltages from the root outward.
        let mut max_dv = T::zero();
        for &i in &order {
            let Some(e) = &edge[i] else { continue };
            let vp = v[e.parent];
            let new = if e.tap_at_parent {
                vp / e.tap - e.z * through[i]
            } else {
                (vp - e.z * through[i] * e.tap) * e.tap
            };
            let dv = (new - v[i]).norm();
            if dv.is_nan() {
                return Err(PowerFlowError::NonConvergence {
                    iterations: sweep,
                    mismatch: f64::NAN,
                });
            }
            max_dv = max_dv.max(dv);
            v[i] = new;
        }
        last_dv = max_dv.to_f64_lossy();
        if max_dv <= opts.tolerance {
            // Keep sweeping until the nodal mismatch also meets the tolerance,
            // unless the iterate has stopped moving (round-off floor).
            let sol = finish(net, &ybus, &v, sweep);
            if sol.max_mismatch <= opts.tolerance || max_dv <= T::epsilon() * T::of(64.0) {
                return Ok(sol);
            }
        }
    }
    Err(PowerFlowError::NonConvergence {
        iterations: opts.max_iterations,
        mismatch: last_dv,
    })
}
