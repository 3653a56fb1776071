use super::*;
use crate::model::BusKind;
use crate::network::{NetBranch, NetBus, Network};

fn bus(kind: BusKind, p: f64, q: f64) -> NetBus<f64> {
    NetBus {
        kind,
        v_set: 1.0,
        theta_set: 0.0,
        p_inj: p,
        q_inj: q,
        shunt_b: 0.0,
        v_min: 0.95,
        v_max: 1.05,
    }
}

fn line(from: usize, to: usize, r: f64, x: f64) -> NetBranch<f64> {
    NetBranch { from, to, r, x, b: 0.0, tap: 1.0, rating: 10.0 }
}

fn two_bus(p_load: f64, q_load: f64) -> Network<f64> {
    Network {
        bus_ids: vec!["1".into(), "2".into()],
        buses: vec![bus(BusKind::Slack, 0.0, 0.0), bus(BusKind::Pq, -p_load, -q_load)],
        branch_ids: vec!["12".into()],
        branches: vec![line(0, 1, 0.01, 0.02)],
    }
}

/// Receiving-end magnitude of a 2-bus line from the closed-form quartic:
/// V⁴ + (2(rP + xQ) − V₁²)V² + |Z|²|S|² = 0, larger root.
fn two_bus_analytic(v1: f64, r: f64, x: f64, p: f64, q: f64) -> f64 {
    let a = v1 * v1 - 2.0 * (r * p + x * q);
    let c = (r * r + x * x) * (p * p + q * q);
    ((a + (a * a - 4.0 * c).sqrt()) / 2.0).sqrt()
}

/// A small branching feeder: 0 - 1 - 2 - 3 with a lateral 1 - 4 - 5.
fn branching_feeder() -> Network<f64> {
    let loads = [(0.0, 0.0), (0.05, 0.02), (0.04, 0.01), (0.06, 0.03), (0.02, 0.01), (0.03, 0.02)];
    let mut buses: Vec<NetBus<f64>> = loads
        .iter()
        .map(|&(p, q)| bus(BusKind::Pq, -p, -q))
        .collect();
    buses[0] = bus(BusKind::Slack, 0.0, 0.0);
    buses[0].v_set = 1.02;
    buses[3].shunt_b = 0.02;
    let mut branches = vec![
        line(0, 1, 0.02, 0.04),
        line(1, 2, 0.03, 0.03),
        line(2, 3, 0.02, 0.01),
        line(4, 1, 0.01, 0.02),
        line(4, 5, 0.04, 0.02),
    ];
    branches[0].tap = 0.975;
    branches[1].b = 0.001;
    // Tap on the child side of the lateral.
    branches[3].tap = 1.0125;
    Network {
        bus_ids: (0..6).map(|i| format!("n{i}")).collect(),
        buses,
        branch_ids: (0..5).map(|i| format!("b{i}")).collect(),
        branches,
    }
}

#[test]
fn two_bus_matches_closed_form() {
    let want = two_bus_analytic(1.0, 0.01, 0.02, 0.1, 0.05);
    // Frozen from the closed form above.
    assert!((want - 0.997_994_852_121_023).abs() < 1e-12);
    let sol = solve_meshed(&two_bus(0.1, 0.05), &SolverOptions::newton()).unwrap();
    assert!((sol.v_mag[1] - want).abs() < 1e-8, "{} vs {want}", sol.v_mag[1]);
    assert!(sol.max_mismatch <= 1e-8);
    let radial = solve_radial(&two_bus(0.1, 0.05), &SolverOptions::sweep()).unwrap();
    assert!((radial.v_mag[1] - want).abs() < 1e-8);
}

#[test]
fn no_flow_identity() {
    let mut net = branching_feeder();
    for b in &mut net.buses {
        b.p_inj = 0.0;
        b.q_inj = 0.0;
        b.shunt_b = 0.0;
        b.v_set = 1.0;
    }
    for br in &mut net.branches {
        br.tap = 1.0;
        br.b = 0.0;
    }
    let sol = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    assert!(sol.v_mag.iter().all(|&v| v == 1.0));
    assert!(sol.v_ang.iter().all(|&a| a == 0.0));
    assert_eq!(sol.losses_total, 0.0);
    assert_eq!(sol.iterations, 0);
}

#[test]
fn beyond_nose_point_does_not_converge() {
    let err = solve_meshed(&two_bus(30.0, 10.0), &SolverOptions::newton()).unwrap_err();
    assert!(
        matches!(err, PowerFlowError::NonConvergence { .. } | PowerFlowError::SingularJacobian { .. }),
        "{err}"
    );
    assert!(solve_radial(&two_bus(30.0, 10.0), &SolverOptions::sweep()).is_err());
}

#[test]
fn radial_matches_newton_on_branching_feeder() {
    let net = branching_feeder();
    let a = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    let b = solve_radial(&net, &SolverOptions::sweep()).unwrap();
    for (x, y) in a.v_mag.iter().zip(&b.v_mag) {
        assert!((x - y).abs() < 1e-7, "{x} vs {y}");
    }
    assert!((a.losses_total - b.losses_total).abs() < 1e-7);
    assert!(b.max_mismatch <= 1e-8);
}

#[test]
fn uniform_no_load_head_voltage() {
    let mut net = two_bus(0.0, 0.0);
    net.buses[0].v_set = 1.02;
    let sol = solve_radial(&net, &SolverOptions::sweep()).unwrap();
    assert!(sol.v_mag.iter().all(|&v| (v - 1.02).abs() < 1e-15));
}

#[test]
fn local_balance_leaves_no_flow() {
    // Leaf load 0.1 + j0.05 exactly offset by a DER injection at the same bus.
    let mut net = two_bus(0.1, 0.05);
    net.buses[1].p_inj += 0.1;
    net.buses[1].q_inj += 0.05;
    let radial = solve_radial(&net, &SolverOptions::sweep()).unwrap();
    let meshed = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    assert!((radial.v_mag[1] - meshed.v_mag[1]).abs() < 1e-12);
    assert!((radial.v_mag[1] - 1.0).abs() < 1e-12);
    assert!(radial.branch_flows[0].s_max() < 1e-12);
}

#[test]
fn power_balance_closes() {
    let net = branching_feeder();
    for sol in [
        solve_meshed(&net, &SolverOptions::newton()).unwrap(),
        solve_radial(&net, &SolverOptions::sweep()).unwrap(),
    ] {
        // Generation is the slack injection; loads are the specified injections.
        let slack_gen = sol.p_inj[0];
        let load: f64 = net.buses[1..].iter().map(|b| -b.p_inj).sum();
        assert!((slack_gen - load - sol.losses_total).abs() <= 1e-8);
        assert!(sol.losses_total >= 0.0);
    }
}

#[test]
fn reactive_injection_raises_local_voltage() {
    let net = branching_feeder();
    let base = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    for i in 1..net.len() {
        let mut bumped = net.clone();
        bumped.buses[i].q_inj += 1e-3;
        let sol = solve_meshed(&bumped, &SolverOptions::newton()).unwrap();
        assert!(sol.v_mag[i] >= base.v_mag[i], "bus {i}");
    }
}

#[test]
fn single_precision_solves() {
    let net: Network<f32> = two_bus(0.1, 0.05).cast();
    let want = two_bus_analytic(1.0, 0.01, 0.02, 0.1, 0.05);
    let a = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    let b = solve_radial(&net, &SolverOptions::sweep()).unwrap();
    assert!((f64::from(a.v_mag[1]) - want).abs() < 1e-5);
    assert!((f64::from(b.v_mag[1]) - want).abs() < 1e-5);
}

#[test]
fn multiple_slack_buses_hold_their_voltages() {
    let mut net = two_bus(0.0, 0.0);
    net.buses[1].kind = BusKind::Slack;
    net.buses[1].v_set = 0.98;
    net.buses[1].theta_set = -0.01;
    let sol = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    assert_eq!(sol.v_mag[1], 0.98);
    assert!(sol.p_inj[0] > 0.0);
}

#[test]
fn pv_bus_holds_magnitude() {
    let mut net = branching_feeder();
    net.buses[3].kind = BusKind::Pv;
    net.buses[3].v_set = 1.0;
    let sol = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    assert!((sol.v_mag[3] - 1.0).abs() < 1e-12);
    assert!(matches!(
        solve_radial(&net, &SolverOptions::sweep()),
        Err(PowerFlowError::Unsupported { .. })
    ));
}

#[test]
fn radial_rejects_loops_and_islands() {
    let mut net = branching_feeder();
    net.branches.push(line(3, 5, 0.01, 0.01));
    net.branch_ids.push("loop".into());
    assert_eq!(
        solve_radial(&net, &SolverOptions::sweep()).unwrap_err(),
        PowerFlowError::NotRadial { branch: "loop".into() }
    );
    let mut net = branching_feeder();
    net.branches.pop();
    net.branch_ids.pop();
    assert_eq!(
        solve_radial(&net, &SolverOptions::sweep()).unwrap_err(),
        PowerFlowError::Disconnected { bus: "n5".into() }
    );
}

#[test]
fn violation_report_by_definition() {
    let net = two_bus(0.0, 0.0);
    let mut sol = solve_meshed(&net, &SolverOptions::newton()).unwrap();
    assert!(total_violations(&sol, &net).is_empty());
    sol.v_mag[1] = 1.06;
    let rep = total_violations(&sol, &net);
    assert_eq!(rep.count, 1);
    assert_eq!(rep.entries[0].bus, "2");
    assert_eq!(rep.entries[0].bound, Bound::Upper);
    assert!((rep.worst_deviation - 0.01).abs() < 1e-12);
}
