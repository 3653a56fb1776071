//! Flat bus/branch networks handed to the power-flow solvers, and the
//! builders that assemble them from a [`GridModel`] at a given state.

use crate::model::{BusKind, ControlVector, FeederModel, GridModel, NetworkState};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct NetBus<T> {
    pub kind: BusKind,
    /// Held magnitude (slack, PV) and angle (slack).
    pub v_set: T,
    pub theta_set: T,
    /// Net injection: generation minus load.
    pub p_inj: T,
    pub q_inj: T,
    /// Shunt susceptance to ground (capacitor banks).
    pub shunt_b: T,
    pub v_min: T,
    pub v_max: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetBranch<T> {
    pub from: usize,
    pub to: usize,
    pub r: T,
    pub x: T,
    pub b: T,
    /// Off-nominal ratio on the `from` side.
    pub tap: T,
    pub rating: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub bus_ids: Vec<String>,
    pub buses: Vec<NetBus<T>>,
    pub branch_ids: Vec<String>,
    pub branches: Vec<NetBranch<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.bus_ids.iter().position(|b| b == id)
    }

    pub fn slack_buses(&self) -> impl Iterator<Item = usize> + '_ {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(i, _)| i)
    }

    /// Converts every numeric field to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let c = |x: T| U::of(x.to_f64_lossy());
        Network {
            bus_ids: self.bus_ids.clone(),
            buses: self
                .buses
                .iter()
                .map(|b| NetBus {
                    kind: b.kind,
                    v_set: c(b.v_set),
                    theta_set: c(b.theta_set),
                    p_inj: c(b.p_inj),
                    q_inj: c(b.q_inj),
                    shunt_b: c(b.shunt_b),
                    v_min: c(b.v_min),
                    v_max: c(b.v_max),
                })
                .collect(),
            branch_ids: self.branch_ids.clone(),
            branches: self
                .branches
                .iter()
                .map(|br| NetBranch {
                    from: br.from,
                    to: br.to,
                    r: c(br.r),
                    x: c(br.x),
                    b: c(br.b),
                    tap: c(br.tap),
                    rating: c(br.rating),
                })
                .collect(),
        }
    }
}

impl Network<f64> {
    fn push_bus(&mut self, id: &str, bus: NetBus<f64>) -> usize {
        self.bus_ids.push(id.to_owned());
        self.buses.push(bus);
        self.buses.len() - 1
    }
}

fn empty() -> Network<f64> {
    Network {
        bus_ids: Vec::new(),
        buses: Vec::new(),
        branch_ids: Vec::new(),
        branches: Vec::new(),
    }
}

fn model_bus(b: &crate::model::Bus, p_load: f64, q_load: f64) -> NetBus<f64> {
    NetBus {
        kind: b.kind,
        v_set: b.v_set,
        theta_set: 0.0,
        p_inj: if b.kind == BusKind::Pv { b.p_gen } else { 0.0 } - p_load,
        q_inj: -q_load,
        shunt_b: 0.0,
        v_min: b.v_min,
        v_max: b.v_max,
    }
}

fn tap_ratio(br: &crate::model::Branch, position: Option<u32>) -> f64 {
    match (&br.tap, position) {
        (Some(t), Some(p)) => t.ratio(p),
        (Some(t), None) => t.ratio(t.position),
        (None, _) => 1.0,
    }
}

/// Appends feeder `fi`'s buses, branches and devices. `node_of_head` is the
/// index the head bus already occupies in `net`.
fn append_feeder(
    net: &mut Network<f64>,
    feeder: &FeederModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    node_of_head: usize,
) {
    let base = net.len();
    let fs = &state.feeders[fi];
    let fc = &controls.feeders[fi];
    for (b, &(p, q)) in feeder.buses.iter().zip(&fs.loads) {
        net.push_bus(&b.id, model_bus(b, p, q));
    }
    let node = |id: &str| -> usize {
        if id == feeder.head_bus {
            node_of_head
        } else {
            base + feeder.bus_index(id).expect("validated feeder bus")
        }
    };
    for (k, br) in feeder.branches.iter().enumerate() {
        net.branch_ids.push(br.id.clone());
        net.branches.push(NetBranch {
            from: node(&br.from),
            to: node(&br.to),
            r: br.r,
            x: br.x,
            b: br.b_shunt,
            tap: tap_ratio(br, fc.taps[k]),
            rating: br.rating,
        });
    }
    for (c, &st) in feeder.capacitors.iter().zip(&fc.caps) {
        net.buses[node(&c.bus)].shunt_b += c.q_step * f64::from(st);
    }
    for (d, der) in feeder.ders.iter().enumerate() {
        let (p, q) = der.effective_injection(fc.ders[d], fs.p_avail[d]);
        let i = node(&der.bus);
        net.buses[i].p_inj += p;
        net.buses[i].q_inj += q;
    }
}

/// The complete transmission-and-distribution network.
pub fn full_network(grid: &GridModel, state: &NetworkState, controls: &ControlVector) -> Network<f64> {
    let mut net = subtransmission_core(grid, state, controls);
    let heads = grid.head_indices();
    for (fi, f) in grid.feeders.iter().enumerate() {
        append_feeder(&mut net, f, fi, state, controls, heads[fi]);
    }
    net
}

fn subtransmission_core(
    grid: &GridModel,
    state: &NetworkState,
    controls: &ControlVector,
) -> Network<f64> {
    let mut net = empty();
    for (b, &(p, q)) in grid.buses.iter().zip(&state.loads) {
        net.push_bus(&b.id, model_bus(b, p, q));
    }
    for (k, br) in grid.branches.iter().enumerate() {
        net.branch_ids.push(br.id.clone());
        net.branches.push(NetBranch {
            from: grid.bus_index(&br.from).expect("validated"),
            to: grid.bus_index(&br.to).expect("validated"),
            r: br.r,
            x: br.x,
            b: br.b_shunt,
            tap: tap_ratio(br, controls.taps[k]),
            rating: br.rating,
        });
    }
    for (c, &st) in grid.capacitors.iter().zip(&controls.caps) {
        let i = grid.bus_index(&c.bus).expect("validated");
        net.buses[i].shunt_b += c.q_step * f64::from(st);
    }
    net
}

/// Sub-transmission network with each feeder collapsed to its head-bus
/// import `(p, q)`.
pub fn subtransmission_network(
    grid: &GridModel,
    state: &NetworkState,
    controls: &ControlVector,
    feeder_imports: &[(f64, f64)],
) -> Network<f64> {
    let mut net = subtransmission_core(grid, state, controls);
    for (i, (p, q)) in grid.head_indices().into_iter().zip(feeder_imports) {
        net.buses[i].p_inj -= p;
        net.buses[i].q_inj -= q;
    }
    net
}

/// One feeder with its head bus as the slack at `head_v` (angle 0). The head
/// bus is always node 0.
pub fn feeder_network(
    grid: &GridModel,
    fi: usize,
    state: &NetworkState,
    controls: &ControlVector,
    head_v: f64,
) -> Network<f64> {
    let feeder = &grid.feeders[fi];
    let head = &grid.buses[grid.bus_index(&feeder.head_bus).expect("validated")];
    let mut net = empty();
    net.push_bus(
        &head.id,
        NetBus {
            kind: BusKind::Slack,
            v_set: head_v,
            theta_set: 0.0,
            p_inj: 0.0,
            q_inj: 0.0,
            shunt_b: 0.0,
            v_min: head.v_min,
            v_max: head.v_max,
        },
    );
    append_feeder(&mut net, feeder, fi, state, controls, 0);
    net
}
