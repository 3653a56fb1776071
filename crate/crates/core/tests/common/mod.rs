#![allow(dead_code)]

pub mod oracles;

use tdvvc::model::{
    Branch, Bus, BusKind, Der, DerKind, FeederModel, GridModel, Level, NetworkTier, ShuntCapacitor,
};

pub fn bus(id: &str, kind: BusKind, level: Level) -> Bus {
    Bus {
        id: id.into(),
        kind,
        base_kv: if level == Level::Distribution { 12.47 } else { 69.0 },
        v_min: 0.95,
        v_max: 1.05,
        level,
        v_set: 1.0,
        p_gen: 0.0,
    }
}

pub fn dist(id: &str) -> Bus {
    bus(id, BusKind::Pq, Level::Distribution)
}

pub fn line(id: &str, from: &str, to: &str, r: f64, x: f64) -> Branch {
    Branch { id: id.into(), from: from.into(), to: to.into(), r, x, b_shunt: 0.0, rating: 5.0, tap: None }
}

pub fn pv(id: &str, bus: &str, s_rating: f64) -> Der {
    Der {
        id: id.into(),
        bus: bus.into(),
        kind: DerKind::PvInverter,
        s_rating,
        p_avail: 0.0,
        p_set: s_rating,
        q_set: 0.0,
        dr_cost: 1.0,
        network_tier: NetworkTier::Fan,
    }
}

pub fn storage(id: &str, bus: &str, s_rating: f64, p_max: f64) -> Der {
    Der {
        id: id.into(),
        bus: bus.into(),
        kind: DerKind::Storage,
        s_rating,
        p_avail: p_max,
        p_set: 0.0,
        q_set: 0.0,
        dr_cost: 2.0,
        network_tier: NetworkTier::Nan,
    }
}

/// Slack `S` with one feeder `F1` of buses `A`, `B` in a chain.
pub fn minimal_grid(horizon: usize) -> GridModel {
    GridModel {
        name: "minimal".into(),
        base_mva: 10.0,
        buses: vec![bus("S", BusKind::Slack, Level::Subtransmission)],
        branches: vec![],
        capacitors: vec![],
        feeders: vec![FeederModel {
            id: "F1".into(),
            head_bus: "S".into(),
            buses: vec![dist("A"), dist("B")],
            branches: vec![line("S-A", "S", "A", 0.01, 0.02), line("A-B", "A", "B", 0.01, 0.02)],
            ders: vec![],
            capacitors: vec![],
            load_series: vec![vec![(0.05, 0.02); horizon], vec![(0.04, 0.01); horizon]],
            pv_series: vec![],
        }],
        load_series: vec![vec![(0.0, 0.0); horizon]],
    }
}

/// Slack `S`, line to `M` carrying a reactive load and a one-step
/// capacitor, no feeders.
pub fn cap_grid(q_load: f64) -> GridModel {
    GridModel {
        name: "cap".into(),
        base_mva: 10.0,
        buses: vec![bus("S", BusKind::Slack, Level::Subtransmission), bus("M", BusKind::Pq, Level::Subtransmission)],
        branches: vec![line("S-M", "S", "M", 0.02, 0.06)],
        capacitors: vec![ShuntCapacitor { id: "M-C1".into(), bus: "M".into(), q_step: 0.04, n_steps: 1, state: 0 }],
        feeders: vec![],
        load_series: vec![vec![(0.0, 0.0); 2], vec![(0.3, q_load); 2]],
    }
}

/// A feeder with one PV unit at its leaf and a configurable local load.
pub fn pv_feeder(p_avail: f64, load: (f64, f64), v_max: f64) -> GridModel {
    let mut g = minimal_grid(2);
    let f = &mut g.feeders[0];
    for b in &mut f.buses {
        b.v_max = v_max;
    }
    f.ders = vec![pv("PV1", "B", 0.15)];
    f.pv_series = vec![vec![p_avail; 2]];
    f.load_series = vec![vec![(0.01, 0.005); 2], vec![load; 2]];
    g
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
