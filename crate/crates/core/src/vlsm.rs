//! Voltage-load sensitivity matrix of a radial feeder.
//!
//! Sign convention: injection-positive. `s_p[i][j]` is the change of the
//! voltage magnitude at feeder bus `i` per unit of additional real-power
//! *injection* at bus `j` (generation up or load down), so on inductive
//! feeders the diagonals of both `s_p` and `s_q` are positive. The head
//! bus is the fixed-voltage boundary and is not part of the matrix; rows and
//! columns follow the feeder's bus order.
//!
//! Entries are central finite differences around a converged base point,
//! one perturbed pair of radial solves per bus and channel.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::network::Network;
use crate::powerflow::{solve_radial, PowerFlowError, PowerFlowSolution, SolverOptions};
use crate::scalar::Scalar;

/// Default finite-difference step, per-unit.
pub const DEFAULT_PERTURBATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    P,
    Q,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::P => "P",
            Channel::Q => "Q",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VlsmError {
    #[error("base power flow failed: {0}")]
    Base(PowerFlowError),
    #[error("perturbed power flow failed at bus {bus}, channel {channel}: {source}")]
    Perturbed {
        bus: String,
        channel: Channel,
        source: PowerFlowError,
    },
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Sensitivity of the feeder-head import (real and reactive) to nodal
/// injections, one entry per feeder bus.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSensitivity<T> {
    pub p_by_p: Vec<T>,
    pub p_by_q: Vec<T>,
    pub q_by_p: Vec<T>,
    pub q_by_q: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlsMatrix<T> {
    pub feeder_id: String,
    /// Feeder bus ids, in row/column order.
    pub bus_ids: Vec<String>,
    /// Network the matrix was linearized on (head bus is node 0).
    pub base_network: Network<T>,
    pub base_point: PowerFlowSolution<T>,
    pub s_p: Matrix<T>,
    pub s_q: Matrix<T>,
    pub head: HeadSensitivity<T>,
    pub perturbation_size: T,
}

impl<T: Scalar> VlsMatrix<T> {
    /// Linearizes feeder network `net` (head bus at node 0) by central
    /// differences of size `h`.
    pub fn compute(feeder_id: &str, net: &Network<T>, h: T) -> Result<Self, VlsmError> {
        let opts = SolverOptions::sweep();
        let base = solve_radial(net, &opts).map_err(VlsmError::Base)?;
        let n = net.len() - 1;
        let two_h = h + h;

        let tasks: Vec<(Channel, usize)> = [Channel::P, Channel::Q]
            .into_iter()
            .flat_map(|c| (1..=n).map(move |j| (c, j)))
            .collect();
        let columns: Vec<(Vec<T>, [T; 2])> = tasks
            .par_iter()
            .map(|&(channel, j)| {
                let solve = |delta: T| -> Result<PowerFlowSolution<T>, VlsmError> {
                    let mut p = net.clone();
                    match channel {
                        Channel::P => p.buses[j].p_inj += delta,
                        Channel::Q => p.buses[j].q_inj += delta,
                    }
                    solve_radial(&p, &opts).map_err(|source| VlsmError::Perturbed {
                        bus: net.bus_ids[j].clone(),
                        channel,
                        source,
                    })
                };
                let up = solve(h)?;
                let down = solve(-h)?;
                let col = (1..=n).map(|i| (up.v_mag[i] - down.v_mag[i]) / two_h).collect();
                let head = [
                    (up.p_inj[0] - down.p_inj[0]) / two_h,
                    (up.q_inj[0] - down.q_inj[0]) / two_h,
                ];
                Ok((col, head))
            })
            .collect::<Result<_, VlsmError>>()?;

        let mut s_p = Matrix::zeros(n, n);
        let mut s_q = Matrix::zeros(n, n);
        let mut head = HeadSensitivity {
            p_by_p: vec![T::zero(); n],
            p_by_q: vec![T::zero(); n],
            q_by_p: vec![T::zero(); n],
            q_by_q: vec![T::zero(); n],
        };
        for (&(channel, j), (col, hd)) in tasks.iter().zip(columns) {
            let (m, hp, hq) = match channel {
                Channel::P => (&mut s_p, &mut head.p_by_p, &mut head.q_by_p),
                Channel::Q => (&mut s_q, &mut head.p_by_q, &mut head.q_by_q),
            };
            for (i, v) in col.into_iter().enumerate() {
                m.set(i, j - 1, v);
            }
            hp[j - 1] = hd[0];
            hq[j - 1] = hd[1];
        }

        Ok(Self {
            feeder_id: feeder_id.to_owned(),
            bus_ids: net.bus_ids[1..].to_vec(),
            base_network: net.clone(),
            base_point: base,
            s_p,
            s_q,
            head,
            perturbation_size: h,
        })
    }

    pub fn dim(&self) -> usize {
        self.bus_ids.len()
    }

    /// Base-point voltage magnitudes of the feeder buses, in matrix order.
    pub fn base_voltages(&self) -> &[T] {
        &self.base_point.v_mag[1..]
    }

    /// Base-point head import `(p, q)`.
    pub fn base_head(&self) -> (T, T) {
        (self.base_point.p_inj[0], self.base_point.q_inj[0])
    }

    fn check_dims(&self, dp: &[T], dq: &[T]) -> Result<(), VlsmError> {
        for v in [dp, dq] {
            if v.len() != self.dim() {
                return Err(VlsmError::Dimension {
                    expected: self.dim(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Linear voltage response `s_p·dp + s_q·dq` to injection changes.
    pub fn predict_dv(&self, dp: &[T], dq: &[T]) -> Result<Vec<T>, VlsmError> {
        self.check_dims(dp, dq)?;
        let a = self.s_p.mul_vec(dp);
        let b = self.s_q.mul_vec(dq);
        Ok(a.into_iter().zip(b).map(|(x, y)| x + y).collect())
    }

    /// Linear head-import response to injection changes.
    pub fn predict_head(&self, dp: &[T], dq: &[T]) -> Result<(T, T), VlsmError> {
        self.check_dims(dp, dq)?;
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
        Ok((
            dot(&self.head.p_by_p, dp) + dot(&self.head.p_by_q, dq),
            dot(&self.head.q_by_p, dp) + dot(&self.head.q_by_q, dq),
        ))
    }

    /// True when `net` carries exactly the injections, shunts, taps and head
    /// voltage this matrix was linearized at.
    pub fn matches_base(&self, net: &Network<T>) -> bool {
        net.bus_ids == self.base_network.bus_ids
            && net.buses == self.base_network.buses
            && net.branches == self.base_network.branches
    }

    /// CSV dump: one row per (row bus, column bus) with both entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_bus,col_bus,s_p,s_q\n");
        for (i, ri) in self.bus_ids.iter().enumerate() {
            for (j, cj) in self.bus_ids.iter().enumerate() {
                out.push_str(&format!("{ri},{cj},{},{}\n", self.s_p.get(i, j), self.s_q.get(i, j)));
            }
        }
        out
    }
}
