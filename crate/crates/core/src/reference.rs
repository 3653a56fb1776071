//! Bundled reference scenarios, generated deterministically.
//!
//! * `two_bus`: one slack bus feeding a single-bus feeder with one PV unit.
//! * `three_bus`: a small tap-controlled sub-transmission chain with a
//!   two-bus feeder carrying a capacitor and two DERs.
//! * `ieee33_high_pv`: the 33-bus Baran-Wu radial feeder behind a tap
//!   changer, loaded over a 24 h day with enough PV to push the far ends
//!   above 1.05 pu around noon.
//! * `two_feeder`: a meshed four-bus sub-transmission ring with two feeders.
//! * `islands`: two electrically separate systems, each with one feeder.

use crate::comms::LatencyProfile;
use crate::model::{
    Branch, Bus, BusKind, Der, DerKind, FeederModel, GridModel, Level, LoadPoint, NetworkTier,
    ShuntCapacitor, TapChanger, TAP_STEP,
};
use crate::scenario::{SimConfig, SERIES_STEP_S};

/// Intervals in one day at the series resolution.
pub const DAY: usize = (24.0 * 3600.0 / SERIES_STEP_S) as usize;

pub const NAMES: [&str; 5] = ["two_bus", "three_bus", "ieee33_high_pv", "two_feeder", "islands"];

/// Builds a reference scenario by name.
pub fn by_name(name: &str) -> Option<(GridModel, SimConfig)> {
    Some(match name {
        "two_bus" => two_bus(),
        "three_bus" => three_bus(),
        "ieee33_high_pv" => ieee33_high_pv(),
        "two_feeder" => two_feeder(),
        "islands" => islands(),
        _ => return None,
    })
}

fn bus(id: &str, kind: BusKind, base_kv: f64, level: Level) -> Bus {
    Bus {
        id: id.into(),
        kind,
        base_kv,
        v_min: 0.95,
        v_max: 1.05,
        level,
        v_set: 1.0,
        p_gen: 0.0,
    }
}

fn slack(id: &str, base_kv: f64, v_set: f64) -> Bus {
    Bus { v_set, ..bus(id, BusKind::Slack, base_kv, Level::Subtransmission) }
}

fn sub_pq(id: &str, base_kv: f64) -> Bus {
    bus(id, BusKind::Pq, base_kv, Level::Subtransmission)
}

fn dist(id: &str, base_kv: f64) -> Bus {
    bus(id, BusKind::Pq, base_kv, Level::Distribution)
}

fn line(id: &str, from: &str, to: &str, r: f64, x: f64, rating: f64) -> Branch {
    Branch {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        r,
        x,
        b_shunt: 0.0,
        rating,
        tap: None,
    }
}

/// 17-position changer over [0.95, 1.05], starting at neutral.
fn ltc() -> TapChanger {
    let mut t = TapChanger { min: 0.95, max: 1.05, step: TAP_STEP, position: 0 };
    t.position = t.neutral();
    t
}

fn transformer(id: &str, from: &str, to: &str, r: f64, x: f64, rating: f64) -> Branch {
    Branch { tap: Some(ltc()), ..line(id, from, to, r, x, rating) }
}

fn pv(id: &str, bus: &str, s_rating: f64, tier: NetworkTier) -> Der {
    Der {
        id: id.into(),
        bus: bus.into(),
        kind: DerKind::PvInverter,
        s_rating,
        p_avail: 0.0,
        p_set: s_rating,
        q_set: 0.0,
        dr_cost: 1.0,
        network_tier: tier,
    }
}

fn storage(id: &str, bus: &str, s_rating: f64, p_max: f64, tier: NetworkTier) -> Der {
    Der {
        id: id.into(),
        bus: bus.into(),
        kind: DerKind::Storage,
        s_rating,
        p_avail: p_max,
        p_set: 0.0,
        q_set: 0.0,
        dr_cost: 2.0,
        network_tier: tier,
    }
}

fn flex_load(id: &str, bus: &str, p_max: f64, tier: NetworkTier) -> Der {
    Der {
        id: id.into(),
        bus: bus.into(),
        kind: DerKind::ControllableLoad,
        s_rating: p_max,
        p_avail: p_max,
        p_set: 0.0,
        q_set: 0.0,
        dr_cost: 5.0,
        network_tier: tier,
    }
}

fn hour(t: usize) -> f64 {
    t as f64 * SERIES_STEP_S / 3600.0
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    (-((h - center) / width).powi(2)).exp()
}

/// Residential-style daily load multiplier, peaking in the evening.
pub fn load_shape(t: usize) -> f64 {
    let h = hour(t);
    0.62 + 0.18 * bump(h, 8.0, 1.5) + 0.38 * bump(h, 19.0, 2.5)
}

/// Clear-sky PV availability in [0, 1] with a short passing cloud.
pub fn pv_shape(t: usize) -> f64 {
    let h = hour(t);
    if !(6.0..=18.0).contains(&h) {
        return 0.0;
    }
    let s = (std::f64::consts::PI * (h - 6.0) / 12.0).sin().max(0.0).powf(1.5);
    s * (1.0 - 0.35 * bump(h, 14.5, 0.35))
}

fn series(horizon: usize, nominal: LoadPoint, scale: f64) -> Vec<LoadPoint> {
    (0..horizon)
        .map(|t| {
            let k = scale * load_shape(t);
            (nominal.0 * k, nominal.1 * k)
        })
        .collect()
}

fn pv_series(horizon: usize, peak: f64) -> Vec<f64> {
    (0..horizon).map(|t| peak * pv_shape(t)).collect()
}

/// Fills PV series for every PV unit from `peaks` (keyed by DER id) and
/// empty series for the rest.
fn attach_pv(f: &mut FeederModel, horizon: usize, peaks: &[(&str, f64)]) {
    f.pv_series = f
        .ders
        .iter()
        .map(|d| match d.kind {
            DerKind::PvInverter => {
                let peak = peaks.iter().find(|(id, _)| *id == d.id).map_or(0.0, |p| p.1);
                pv_series(horizon, peak)
            }
            _ => Vec::new(),
        })
        .collect();
}

pub fn two_bus() -> (GridModel, SimConfig) {
    let mut feeder = FeederModel {
        id: "F1".into(),
        head_bus: "S".into(),
        buses: vec![dist("L1", 12.47)],
        branches: vec![line("S-L1", "S", "L1", 0.01, 0.02, 2.0)],
        ders: vec![pv("PV1", "L1", 0.12, NetworkTier::Fan)],
        capacitors: vec![],
        load_series: vec![series(DAY, (0.1, 0.05), 1.0)],
        pv_series: vec![],
    };
    attach_pv(&mut feeder, DAY, &[("PV1", 0.1)]);
    let grid = GridModel {
        name: "two_bus".into(),
        base_mva: 10.0,
        buses: vec![slack("S", 12.47, 1.0)],
        branches: vec![],
        capacitors: vec![],
        feeders: vec![feeder],
        load_series: vec![vec![(0.0, 0.0); DAY]],
    };
    let mut cfg = SimConfig::default();
    cfg.latency.profile = LatencyProfile::BudgetAligned;
    (grid, cfg)
}

pub fn three_bus() -> (GridModel, SimConfig) {
    let horizon = 12;
    let mut feeder = FeederModel {
        id: "F1".into(),
        head_bus: "H".into(),
        buses: vec![dist("F1a", 12.47), dist("F1b", 12.47)],
        branches: vec![
            line("H-F1a", "H", "F1a", 0.02, 0.04, 1.0),
            line("F1a-F1b", "F1a", "F1b", 0.03, 0.05, 1.0),
        ],
        ders: vec![
            pv("F1-PV1", "F1a", 0.06, NetworkTier::Fan),
            storage("F1-ES1", "F1b", 0.05, 0.04, NetworkTier::Nan),
        ],
        capacitors: vec![ShuntCapacitor {
            id: "F1-C1".into(),
            bus: "F1b".into(),
            q_step: 0.02,
            n_steps: 1,
            state: 0,
        }],
        load_series: vec![vec![(0.05, 0.02); horizon], vec![(0.06, 0.03); horizon]],
        pv_series: vec![],
    };
    attach_pv(&mut feeder, horizon, &[]);
    feeder.pv_series[0] = vec![0.04; horizon];
    let grid = GridModel {
        name: "three_bus".into(),
        base_mva: 10.0,
        buses: vec![slack("S", 69.0, 1.0), sub_pq("M", 69.0), sub_pq("H", 12.47)],
        branches: vec![
            transformer("S-M", "S", "M", 0.004, 0.04, 3.0),
            line("M-H", "M", "H", 0.01, 0.03, 3.0),
        ],
        capacitors: vec![],
        feeders: vec![feeder],
        load_series: vec![vec![(0.0, 0.0); horizon], vec![(0.3, 0.12); horizon], vec![(0.0, 0.0); horizon]],
    };
    (grid, SimConfig::default())
}

/// Baran-Wu 33-bus feeder: (from, to, r ohm, x ohm, p kW, q kvar at `to`).
const IEEE33: [(u32, u32, f64, f64, f64, f64); 32] = [
    (1, 2, 0.0922, 0.0470, 100.0, 60.0),
    (2, 3, 0.4930, 0.2511, 90.0, 40.0),
    (3, 4, 0.3660, 0.1864, 120.0, 80.0),
    (4, 5, 0.3811, 0.1941, 60.0, 30.0),
    (5, 6, 0.8190, 0.7070, 60.0, 20.0),
    (6, 7, 0.1872, 0.6188, 200.0, 100.0),
    (7, 8, 0.7114, 0.2351, 200.0, 100.0),
    (8, 9, 1.0300, 0.7400, 60.0, 20.0),
    (9, 10, 1.0440, 0.7400, 60.0, 20.0),
    (10, 11, 0.1966, 0.0650, 45.0, 30.0),
    (11, 12, 0.3744, 0.1238, 60.0, 35.0),
    (12, 13, 1.4680, 1.1550, 60.0, 35.0),
    (13, 14, 0.5416, 0.7129, 120.0, 80.0),
    (14, 15, 0.5910, 0.5260, 60.0, 10.0),
    (15, 16, 0.7463, 0.5450, 60.0, 20.0),
    (16, 17, 1.2890, 1.7210, 60.0, 20.0),
    (17, 18, 0.7320, 0.5740, 90.0, 40.0),
    (2, 19, 0.1640, 0.1565, 90.0, 40.0),
    (19, 20, 1.5042, 1.3554, 90.0, 40.0),
    (20, 21, 0.4095, 0.4784, 90.0, 40.0),
    (21, 22, 0.7089, 0.9373, 90.0, 40.0),
    (3, 23, 0.4512, 0.3083, 90.0, 50.0),
    (23, 24, 0.8980, 0.7091, 420.0, 200.0),
    (24, 25, 0.8960, 0.7011, 420.0, 200.0),
    (6, 26, 0.2030, 0.1034, 60.0, 25.0),
    (26, 27, 0.2842, 0.1447, 60.0, 25.0),
    (27, 28, 1.0590, 0.9337, 60.0, 20.0),
    (28, 29, 0.8042, 0.7006, 120.0, 70.0),
    (29, 30, 0.5075, 0.2585, 200.0, 600.0),
    (30, 31, 0.9744, 0.9630, 150.0, 70.0),
    (31, 32, 0.3105, 0.3619, 210.0, 100.0),
    (32, 33, 0.3410, 0.5302, 60.0, 40.0),
];

/// The 33-bus feeder with buses `{prefix}2..{prefix}33` hanging from
/// `head`, loads scaled by `load_scale` and PV units listed as
/// `(bus number, peak pu)`.
pub fn ieee33_feeder(
    id: &str,
    head: &str,
    prefix: &str,
    base_mva: f64,
    horizon: usize,
    load_scale: f64,
    pv_sites: &[(u32, f64)],
) -> FeederModel {
    let kv = 12.66;
    let z_base = kv * kv / base_mva;
    let name = |n: u32| if n == 1 { head.to_owned() } else { format!("{prefix}{n}") };
    let buses = (2..=33).map(|n| dist(&name(n), kv)).collect();
    let branches = IEEE33
        .iter()
        .map(|&(f, t, r, x, _, _)| {
            line(&format!("{id}-L{t}"), &name(f), &name(t), r / z_base, x / z_base, 0.6)
        })
        .collect();
    let load_series = IEEE33
        .iter()
        .map(|&(_, _, _, _, p, q)| series(horizon, (p / 1000.0 / base_mva, q / 1000.0 / base_mva), load_scale))
        .collect();
    let tiers = [NetworkTier::Fan, NetworkTier::Nan, NetworkTier::Ami];
    let mut ders: Vec<Der> = pv_sites
        .iter()
        .enumerate()
        .map(|(k, &(n, peak))| pv(&format!("{id}-PV{n}"), &name(n), 1.2 * peak, tiers[k % tiers.len()]))
        .collect();
    ders.push(storage(&format!("{id}-ES30"), &name(30), 0.03, 0.02, NetworkTier::Fan));
    ders.push(flex_load(&format!("{id}-DR24"), &name(24), 0.02, NetworkTier::Ami));
    let mut f = FeederModel {
        id: id.into(),
        head_bus: head.into(),
        buses,
        branches,
        ders,
        capacitors: vec![ShuntCapacitor {
            id: format!("{id}-C30"),
            bus: name(30),
            q_step: 0.01,
            n_steps: 3,
            state: 0,
        }],
        load_series,
        pv_series: vec![],
    };
    let peaks: Vec<(String, f64)> = pv_sites.iter().map(|&(n, p)| (format!("{id}-PV{n}"), p)).collect();
    let peaks_ref: Vec<(&str, f64)> = peaks.iter().map(|(s, p)| (s.as_str(), *p)).collect();
    attach_pv(&mut f, horizon, &peaks_ref);
    f
}

/// PV sites of the high-PV day: (bus number, peak availability in pu).
pub const IEEE33_PV_SITES: [(u32, f64); 6] = [(14, 0.05), (18, 0.06), (22, 0.04), (25, 0.06), (30, 0.05), (33, 0.06)];

pub fn ieee33_high_pv() -> (GridModel, SimConfig) {
    let base = 10.0;
    let feeder = ieee33_feeder("F33", "B1", "B", base, DAY, 0.5, &IEEE33_PV_SITES);
    let grid = GridModel {
        name: "ieee33_high_pv".into(),
        base_mva: base,
        buses: vec![slack("SUB", 69.0, 1.02), sub_pq("B1", 12.66)],
        branches: vec![transformer("SUB-B1", "SUB", "B1", 0.003, 0.03, 1.5)],
        capacitors: vec![ShuntCapacitor {
            id: "B1-C1".into(),
            bus: "B1".into(),
            q_step: 0.03,
            n_steps: 2,
            state: 0,
        }],
        feeders: vec![feeder],
        load_series: vec![vec![(0.0, 0.0); DAY]; 2],
    };
    (grid, SimConfig::default())
}

/// Small radial feeder used by the multi-feeder systems.
fn lateral_feeder(id: &str, head: &str, horizon: usize, load_scale: f64, pv_peak: f64) -> FeederModel {
    let n = |k: u32| format!("{id}-{k}");
    let buses = (1..=6).map(|k| dist(&n(k), 12.47)).collect();
    let branches = vec![
        line(&format!("{id}-b1"), head, &n(1), 0.01, 0.02, 1.0),
        line(&format!("{id}-b2"), &n(1), &n(2), 0.02, 0.03, 1.0),
        line(&format!("{id}-b3"), &n(2), &n(3), 0.03, 0.03, 1.0),
        line(&format!("{id}-b4"), &n(1), &n(4), 0.02, 0.04, 1.0),
        line(&format!("{id}-b5"), &n(4), &n(5), 0.03, 0.02, 1.0),
        line(&format!("{id}-b6"), &n(5), &n(6), 0.02, 0.02, 1.0),
    ];
    let nominal = [(0.02, 0.01), (0.03, 0.012), (0.025, 0.01), (0.02, 0.008), (0.03, 0.015), (0.02, 0.01)];
    let load_series = nominal.iter().map(|&p| series(horizon, p, load_scale)).collect();
    let mut f = FeederModel {
        id: id.into(),
        head_bus: head.into(),
        buses,
        branches,
        ders: vec![
            pv(&format!("{id}-PV3"), &n(3), 1.2 * pv_peak, NetworkTier::Nan),
            pv(&format!("{id}-PV6"), &n(6), 1.2 * pv_peak, NetworkTier::Ami),
            storage(&format!("{id}-ES2"), &n(2), 0.03, 0.02, NetworkTier::Fan),
            flex_load(&format!("{id}-DR5"), &n(5), 0.01, NetworkTier::Ami),
        ],
        capacitors: vec![ShuntCapacitor {
            id: format!("{id}-C4"),
            bus: n(4),
            q_step: 0.01,
            n_steps: 2,
            state: 0,
        }],
        load_series,
        pv_series: vec![],
    };
    let (a, b) = (format!("{id}-PV3"), format!("{id}-PV6"));
    attach_pv(&mut f, horizon, &[(&a, pv_peak), (&b, pv_peak)]);
    f
}

pub fn two_feeder() -> (GridModel, SimConfig) {
    let horizon = DAY;
    let grid = GridModel {
        name: "two_feeder".into(),
        base_mva: 10.0,
        buses: vec![slack("S", 69.0, 1.01), sub_pq("A", 69.0), sub_pq("B", 12.47), sub_pq("C", 12.47)],
        branches: vec![
            line("S-A", "S", "A", 0.004, 0.02, 3.0),
            transformer("A-B", "A", "B", 0.003, 0.03, 2.0),
            line("B-C", "B", "C", 0.01, 0.03, 2.0),
            transformer("S-C", "S", "C", 0.003, 0.03, 2.0),
        ],
        capacitors: vec![ShuntCapacitor {
            id: "A-C1".into(),
            bus: "A".into(),
            q_step: 0.04,
            n_steps: 2,
            state: 0,
        }],
        feeders: vec![
            lateral_feeder("F1", "B", horizon, 1.0, 0.08),
            lateral_feeder("F2", "C", horizon, 1.2, 0.06),
        ],
        load_series: vec![
            vec![(0.0, 0.0); horizon],
            series(horizon, (0.2, 0.08), 1.0),
            vec![(0.0, 0.0); horizon],
            vec![(0.0, 0.0); horizon],
        ],
    };
    (grid, SimConfig::default())
}

pub fn islands() -> (GridModel, SimConfig) {
    let horizon = 24;
    let grid = GridModel {
        name: "islands".into(),
        base_mva: 10.0,
        buses: vec![
            slack("S1", 69.0, 1.01),
            sub_pq("H1", 12.47),
            slack("S2", 69.0, 1.0),
            sub_pq("H2", 12.47),
        ],
        branches: vec![
            transformer("S1-H1", "S1", "H1", 0.003, 0.03, 2.0),
            transformer("S2-H2", "S2", "H2", 0.004, 0.035, 2.0),
        ],
        capacitors: vec![ShuntCapacitor {
            id: "H2-C1".into(),
            bus: "H2".into(),
            q_step: 0.02,
            n_steps: 2,
            state: 0,
        }],
        feeders: vec![
            lateral_feeder("F1", "H1", horizon, 1.0, 0.08),
            lateral_feeder("F2", "H2", horizon, 1.3, 0.05),
        ],
        load_series: vec![vec![(0.0, 0.0); horizon]; 4],
    };
    let cfg = SimConfig { horizon: Some(horizon), ..SimConfig::default() };
    (grid, cfg)
}
