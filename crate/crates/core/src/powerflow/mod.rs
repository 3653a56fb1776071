//! Steady-state AC power flow.
//!
//! [`solve_meshed`] runs polar Newton–Raphson on any network with at least
//! one slack bus. [`solve_radial`] runs a backward/forward current sweep on
//! a tree rooted at its single slack bus. Both return the same
//! [`PowerFlowSolution`] so they can be cross-checked bus by bus.

mod newton;
mod sweep;
mod violations;

pub use newton::solve_meshed;
pub use sweep::solve_radial;
pub use violations::{total_violations, Bound, Violation, ViolationReport};

use num_complex::Complex;
use thiserror::Error;

use crate::network::Network;
use crate::scalar::Scalar;

/// Complex power flowing into a branch at each end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow<T> {
    pub p_from: T,
    pub q_from: T,
    pub p_to: T,
    pub q_to: T,
}

impl<T: Scalar> BranchFlow<T> {
    /// Largest apparent power at either end.
    pub fn s_max(&self) -> T {
        self.p_from.hypot(self.q_from).max(self.p_to.hypot(self.q_to))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution<T> {
    pub v_mag: Vec<T>,
    pub v_ang: Vec<T>,
    pub branch_flows: Vec<BranchFlow<T>>,
    /// Σ (p_from + p_to) over branches.
    pub losses_total: T,
    /// Net injections implied by the solved voltages.
    pub p_inj: Vec<T>,
    pub q_inj: Vec<T>,
    /// Largest absolute P/Q mismatch at buses with specified injections.
    pub max_mismatch: T,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    pub tolerance: T,
    pub max_iterations: usize,
}

impl<T: Scalar> SolverOptions<T> {
    pub fn newton() -> Self {
        Self {
            tolerance: T::of(T::PF_TOLERANCE),
            max_iterations: 20,
        }
    }

    pub fn sweep() -> Self {
        Self {
            tolerance: T::of(T::PF_TOLERANCE),
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (max mismatch {mismatch:e})")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian at bus {bus}")]
    SingularJacobian { bus: String },
    #[error("bus {bus} is not connected to the slack bus")]
    Disconnected { bus: String },
    #[error("network needs {expected}, found {found} slack buses")]
    SlackCount { expected: &'static str, found: usize },
    #[error("branch {branch} closes a loop; radial solver needs a tree")]
    NotRadial { branch: String },
    #[error("radial solver does not support {what} at bus {bus}")]
    Unsupported { what: &'static str, bus: String },
}

/// Sparse bus admittance matrix, one row of `(column, admittance)` per bus.
pub(crate) struct Admittance<T> {
    pub rows: Vec<Vec<(usize, Complex<T>)>>,
}

/// Branch two-port admittances `(y_ff, y_ft, y_tf, y_tt)`.
pub(crate) fn branch_two_port<T: Scalar>(
    r: T,
    x: T,
    b: T,
    tap: T,
) -> (Complex<T>, Complex<T>, Complex<T>, Complex<T>) {
    let ys = Complex::new(T::one(), T::zero()) / Complex::new(r, x);
    let half_b = Complex::new(T::zero(), b / T::of(2.0));
    let t2 = tap * tap;
    (
        (ys + half_b) / t2,
        -ys / tap,
        -ys / tap,
        ys + half_b,
    )
}

impl<T: Scalar> Admittance<T> {
    pub fn build(net: &Network<T>) -> Self {
        let n = net.len();
        let mut rows: Vec<Vec<(usize, Complex<T>)>> = vec![Vec::new(); n];
        let mut add = |i: usize, j: usize, y: Complex<T>| {
            if let Some(e) = rows[i].iter_mut().find(|(c, _)| *c == j) {
                e.1 += y;
            } else {
                rows[i].push((j, y));
            }
        };
        for (i, b) in net.buses.iter().enumerate() {
            add(i, i, Complex::new(T::zero(), b.shunt_b));
        }
        for br in &net.branches {
            let (yff, yft, ytf, ytt) = branch_two_port(br.r, br.x, br.b, br.tap);
            add(br.from, br.from, yff);
            add(br.from, br.to, yft);
            add(br.to, br.from, ytf);
            add(br.to, br.to, ytt);
        }
        for row in &mut rows {
            row.sort_by_key(|(c, _)| *c);
        }
        Self { rows }
    }

    /// Complex injections `S_i = V_i conj(Σ_j Y_ij V_j)`.
    pub fn injections(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let current = row
                    .iter()
                    .fold(Complex::new(T::zero(), T::zero()), |acc, &(j, y)| acc + y * v[j]);
                v[i] * current.conj()
            })
            .collect()
    }
}

/// Assembles a solution from converged complex voltages.
pub(crate) fn finish<T: Scalar>(
    net: &Network<T>,
    ybus: &Admittance<T>,
    v: &[Complex<T>],
    iterations: usize,
) -> PowerFlowSolution<T> {
    let s = ybus.injections(v);
    let max_mismatch = net
        .buses
        .iter()
        .zip(&s)
        .filter(|(b, _)| b.kind != crate::model::BusKind::Slack)
        .fold(T::zero(), |m, (b, si)| {
            let dp = (b.p_inj - si.re).abs();
            let dq = if b.kind == crate::model::BusKind::Pq {
                (b.q_inj - si.im).abs()
            } else {
                T::zero()
            };
            m.max(dp).max(dq)
        });
    let branch_flows: Vec<BranchFlow<T>> = net
        .branches
        .iter()
        .map(|br| {
            let (yff, yft, ytf, ytt) = branch_two_port(br.r, br.x, br.b, br.tap);
            let (vf, vt) = (v[br.from], v[br.to]);
            let sf = vf * (yff * vf + yft * vt).conj();
            let st = vt * (ytf * vf + ytt * vt).conj();
            BranchFlow {
                p_from: sf.re,
                q_from: sf.im,
                p_to: st.re,
                q_to: st.im,
            }
        })
        .collect();
    let losses_total = branch_flows
        .iter()
        .fold(T::zero(), |acc, f| acc + f.p_from + f.p_to);
    PowerFlowSolution {
        v_mag: v.iter().map(|c| c.norm()).collect(),
        v_ang: v.iter().map(|c| c.arg()).collect(),
        branch_flows,
        losses_total,
        p_inj: s.iter().map(|c| c.re).collect(),
        q_inj: s.iter().map(|c| c.im).collect(),
        max_mismatch,
        converged: true,
        iterations,
    }
}

#[cfg(test)]
mod tests;
