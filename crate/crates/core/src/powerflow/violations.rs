use serde::{Deserialize, Serialize};

use super::PowerFlowSolution;
use crate::network::Network;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub bus: String,
    pub v_mag: f64,
    pub bound: Bound,
    /// Distance outside the breached bound, always positive.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationReport {
    pub entries: Vec<Violation>,
    pub count: usize,
    pub worst_deviation: f64,
}

impl ViolationReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of all deviations.
    pub fn aggregate(&self) -> f64 {
        self.entries.iter().map(|v| v.deviation).sum()
    }
}

/// Every bus whose magnitude lies outside `[v_min, v_max]`, in bus order.
pub fn total_violations<T: Scalar>(sol: &PowerFlowSolution<T>, net: &Network<T>) -> ViolationReport {
    let entries: Vec<Violation> = net
        .buses
        .iter()
        .zip(&sol.v_mag)
        .zip(&net.bus_ids)
        .filter_map(|((b, &v), id)| {
            let (v, lo, hi) = (v.to_f64_lossy(), b.v_min.to_f64_lossy(), b.v_max.to_f64_lossy());
            if v > hi {
                Some(Violation { bus: id.clone(), v_mag: v, bound: Bound::Upper, deviation: v - hi })
            } else if v < lo {
                Some(Violation { bus: id.clone(), v_mag: v, bound: Bound::Lower, deviation: lo - v })
            } else {
                None
            }
        })
        .collect();
    ViolationReport {
        count: entries.len(),
        worst_deviation: entries.iter().map(|v| v.deviation).fold(0.0, f64::max),
        entries,
    }
}
