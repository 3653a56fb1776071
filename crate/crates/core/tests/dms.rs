mod common;

use std::time::Instant;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdvvc::dms::{
    apply_plan, compute_flexibility, compute_vlsm, disaggregate, dms_network, DerDispatch, DispatchMode, DispatchPlan,
    DmsController, DmsError, DmsOptions, OperatingPointRequest, EPS_TRACK,
};
use tdvvc::model::{snapshot_at, ControlVector, DerKind, DerSetpoint, GridModel};
use tdvvc::reference;

use common::oracles::*;

#[test]
fn single_der_tracks_reactive_request() {
    let grid = common::pv_feeder(0.05, (0.02, 0.0), 1.05);
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let (p0, _, _) = head_import(&grid, 0, &state, &controls, 1.0);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let req = request(&grid, 0, 1.0, p0, -0.02);
    let plan = disaggregate(&grid, 0, &state, &controls, &m, &req, &DmsOptions::default()).unwrap();
    assert!(plan.feasible);
    assert!((plan.achieved_q - req.q_request).abs() <= EPS_TRACK);
    assert!((plan.achieved_p - req.p_request).abs() <= EPS_TRACK);
    let applied = apply_plan(&grid, 0, &state, &controls, &plan).unwrap();
    let x = effective(&grid, 0, &state, &applied.feeders[0].ders);
    assert!((x[0].0 - 0.05).abs() <= 1e-9, "real power moved to {}", x[0].0);
    // Head import is -q_set less the small reactive line losses.
    assert!((x[0].1 - 0.025).abs() <= 1e-3, "q_set {}", x[0].1);
}

#[test]
fn null_request_is_a_fixed_point() {
    let grid = common::pv_feeder(0.05, (0.06, 0.02), 1.05);
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let (p0, q0, v) = head_import(&grid, 0, &state, &controls, 1.0);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let opts = DmsOptions::default();
    let plan = disaggregate(&grid, 0, &state, &controls, &m, &request(&grid, 0, 1.0, p0, q0), &opts).unwrap();
    let applied = apply_plan(&grid, 0, &state, &controls, &plan).unwrap();
    let before = effective(&grid, 0, &state, &controls.feeders[0].ders);
    let after = effective(&grid, 0, &state, &applied.feeders[0].ders);
    assert!((before[0].0 - after[0].0).abs() <= 1e-9 && (before[0].1 - after[0].1).abs() <= 1e-6);
    let deviation: f64 = v[1..].iter().map(|x| opts.w_v * (x - opts.v_ref).powi(2)).sum();
    assert!((plan.objective_value - deviation).abs() <= 1e-9, "{} vs {deviation}", plan.objective_value);

    // With no flow anywhere the voltage term vanishes as well.
    let mut idle = grid.clone();
    idle.feeders[0].load_series = vec![vec![(0.0, 0.0); 2]; 2];
    idle.feeders[0].pv_series = vec![vec![0.0; 2]];
    let state = snapshot_at(&idle, 0).unwrap();
    let m = compute_vlsm(&idle, 0, &state, &controls, 1.0).unwrap();
    let plan = disaggregate(&idle, 0, &state, &controls, &m, &request(&idle, 0, 1.0, 0.0, 0.0), &opts).unwrap();
    assert!(plan.objective_value.abs() <= 1e-12);
    assert_eq!(apply_plan(&idle, 0, &state, &controls, &plan).unwrap(), controls);
}

#[test]
fn discrete_dispatch_matches_exhaustive_enumeration() {
    let (grid, _) = reference::three_bus();
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let f = &grid.feeders[0];
    assert_eq!((f.capacitors.len(), f.capacitors[0].n_steps, f.ders.len()), (1, 1, 2));
    let opts = DmsOptions { mode: DispatchMode::Discrete { q_levels: 5 }, ..DmsOptions::default() };
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let (p0, q0) = m.base_head();

    for (dp, dq) in [(0.0, 0.0), (0.0, -0.03), (0.01, -0.06), (0.0, 0.02)] {
        let req = request(&grid, 0, 1.0, p0 + dp, q0 + dq);
        let started = Instant::now();
        let plan = disaggregate(&grid, 0, &state, &controls, &m, &req, &opts).unwrap();
        assert!(started.elapsed().as_secs_f64() < 1.0);

        let best = dms_exhaustive(&grid, &state, &m, &opts, &req, 5);
        assert_eq!(best.3, 50);
        assert!((plan.objective_value - best.0).abs() <= 1e-6, "{} vs {}", plan.objective_value, best.0);
        assert_eq!(plan.capacitors[0].state, best.1);
        for (dd, q) in plan.ders.iter().zip(&best.2) {
            assert!((dd.q_set - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn stale_or_invalid_requests_are_rejected() {
    let (grid, _) = reference::three_bus();
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let (p0, q0) = m.base_head();
    let opts = DmsOptions::default();

    let err = disaggregate(&grid, 0, &state, &controls, &m, &request(&grid, 0, 1.01, p0, q0), &opts).unwrap_err();
    assert_eq!(err, DmsError::StaleSensitivity("F1".into()));
    let mut other = state.clone();
    other.feeders[0].loads[0].0 += 0.01;
    let err = disaggregate(&grid, 0, &other, &controls, &m, &request(&grid, 0, 1.0, p0, q0), &opts).unwrap_err();
    assert!(matches!(err, DmsError::StaleSensitivity(_)));
    assert!(matches!(
        compute_flexibility(&grid, 0, &other, &controls, &m, &opts),
        Err(DmsError::StaleSensitivity(_))
    ));

    let mut wrong = request(&grid, 0, 1.0, p0, q0);
    wrong.feeder = "F9".into();
    assert!(matches!(disaggregate(&grid, 0, &state, &controls, &m, &wrong, &opts), Err(DmsError::WrongFeeder { .. })));
    for bad in [
        request(&grid, 0, 1.0, 50.0, q0),
        request(&grid, 0, 1.0, f64::NAN, q0),
        request(&grid, 0, 1.5, p0, q0),
        OperatingPointRequest { dr_request: -0.1, ..request(&grid, 0, 1.0, p0, q0) },
        OperatingPointRequest { pv_curtailment_request: 1.0, ..request(&grid, 0, 1.0, p0, q0) },
    ] {
        assert!(matches!(disaggregate(&grid, 0, &state, &controls, &m, &bad, &opts), Err(DmsError::InvalidRequest(_))));
    }
}

#[test]
fn apply_plan_guards_capability_and_is_idempotent() {
    let (grid, _) = reference::three_bus();
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let ctl = DmsController::new(0);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let (p0, q0) = m.base_head();
    let out = ctl.handle(&grid, &state, &controls, &request(&grid, 0, 1.0, p0 - 0.01, q0 - 0.02)).unwrap();
    let again = apply_plan(&grid, 0, &state, &out.controls, &out.plan).unwrap();
    assert_eq!(again, out.controls);
    let (p, q, _) = head_import(&grid, 0, &state, &out.controls, 1.0);
    assert!((p - (p0 - 0.01)).abs() <= EPS_TRACK && (q - (q0 - 0.02)).abs() <= EPS_TRACK);

    let mut bad: DispatchPlan = out.plan.clone();
    bad.ders[1] = DerDispatch { id: "F1-ES1".into(), p_set: 0.04, q_set: 0.04 };
    let err = apply_plan(&grid, 0, &state, &controls, &bad).unwrap_err();
    assert!(matches!(&err, DmsError::Capability { device, .. } if device == "F1-ES1"), "{err}");
    assert!(err.to_string().contains("F1-ES1"));

    let mut bad = out.plan.clone();
    bad.capacitors[0].state = 2;
    let err = apply_plan(&grid, 0, &state, &controls, &bad).unwrap_err();
    assert!(err.to_string().contains("F1-C1"));
}

#[test]
fn feeder_without_ders_has_no_flexibility() {
    let grid = common::minimal_grid(2);
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let (p, q, _) = head_import(&grid, 0, &state, &controls, 1.0);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let r = compute_flexibility(&grid, 0, &state, &controls, &m, &DmsOptions::default()).unwrap();
    for x in [r.p_min, r.p_max, r.p_forecast] {
        assert!((x - p).abs() <= 1e-12);
    }
    for x in [r.q_min, r.q_max, r.q_forecast] {
        assert!((x - q).abs() <= 1e-12);
    }
    assert!(p > 0.09 && q > 0.03);
}

#[test]
fn curtailable_pv_widens_the_real_power_range() {
    let grid = common::pv_feeder(0.1, (0.1, 0.03), 1.05);
    let state = snapshot_at(&grid, 0).unwrap();
    let controls = ControlVector::initial(&grid);
    let m = compute_vlsm(&grid, 0, &state, &controls, 1.0).unwrap();
    let r = compute_flexibility(&grid, 0, &state, &controls, &m, &DmsOptions::default()).unwrap();
    assert!(r.p_max - r.p_min >= 0.1, "{} .. {}", r.p_min, r.p_max);
    assert!(r.q_min < r.q_max);
    assert!((r.pv_curtailable - 0.1).abs() <= 1e-12);
}

#[test]
fn tight_upper_bound_raises_minimum_import() {
    let v_max = 1.001;
    let mut loose = common::pv_feeder(0.1, (0.02, 0.0), 1.2);
    let mut tight = common::pv_feeder(0.1, (0.02, 0.0), v_max);
    for g in [&mut loose, &mut tight] {
        g.feeders[0].ders[0].s_rating = 0.1;
    }
    let state = snapshot_at(&tight, 0).unwrap();
    let controls = ControlVector::initial(&tight);
    let opts = DmsOptions::default();
    let flex = |g: &GridModel| {
        let m = compute_vlsm(g, 0, &state, &controls, 1.0).unwrap();
        compute_flexibility(g, 0, &state, &controls, &m, &opts).unwrap()
    };
    let (free, bound) = (flex(&loose), flex(&tight));
    assert!(bound.p_min > free.p_min + 1e-3, "{} vs {}", bound.p_min, free.p_min);
    assert!(bound.p_min <= bound.p_forecast && bound.p_forecast <= bound.p_max);

    // Some PV setting reaching the returned bound is voltage-feasible in
    // the nonlinear solve.
    let der = &tight.feeders[0].ders[0];
    let mut feasible = false;
    for k in 0..=40 {
        let (mut lo, mut hi) = (0.0, 0.1);
        let q_of = |p: f64| der.q_capability(p) * (k as f64 / 20.0 - 1.0);
        let import = |p: f64| {
            let mut c = controls.clone();
            c.feeders[0].ders[0] = DerSetpoint { p, q: q_of(p) };
            head_import(&tight, 0, &state, &c, 1.0)
        };
        if import(hi).0 > bound.p_min || import(lo).0 < bound.p_min {
            continue;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if import(mid).0 > bound.p_min {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (_, _, v) = import(hi);
        feasible |= v.iter().all(|&x| x <= v_max + 1e-9);
    }
    assert!(feasible);
}

fn bundled() -> Vec<(GridModel, usize)> {
    reference::NAMES
        .iter()
        .flat_map(|n| {
            let (g, _) = reference::by_name(n).unwrap();
            (0..g.feeders.len()).map(move |fi| (g.clone(), fi))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reachable_requests_are_tracked_and_feasible_plans_are_safe(
        which in any::<prop::sample::Index>(),
        t in 0usize..288,
        seed in any::<u64>(),
    ) {
        let all = bundled();
        let (grid, fi) = &all[which.index(all.len())];
        let state = snapshot_at(grid, t % grid.horizon()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let req = reachable_request(grid, *fi, &state, &mut rng);
        prop_assume!(req.is_some());
        let req = req.unwrap();
        let controls = ControlVector::initial(grid);
        let out = DmsController::new(*fi).handle(grid, &state, &controls, &req).unwrap();
        let (p, q, v) = head_import(grid, *fi, &state, &out.controls, req.substation_voltage_setpoint);
        prop_assert!((p - req.p_request).abs() <= EPS_TRACK, "p {} vs {}", p, req.p_request);
        prop_assert!((q - req.q_request).abs() <= EPS_TRACK, "q {} vs {}", q, req.q_request);
        if out.plan.feasible {
            let net = dms_network(grid, *fi, &state, &out.controls, req.substation_voltage_setpoint);
            for (vi, b) in v.iter().zip(&net.buses).skip(1) {
                prop_assert!(*vi <= b.v_max && *vi >= b.v_min);
            }
        }
        for ((d, sp), &a) in grid.feeders[*fi].ders.iter().zip(&out.controls.feeders[*fi].ders).zip(&state.feeders[*fi].p_avail) {
            prop_assert!(d.check_setpoint(*sp, a).is_ok());
            if d.kind == DerKind::ControllableLoad {
                prop_assert_eq!(sp.q, 0.0);
            }
        }
    }

    #[test]
    fn flexibility_reports_are_ordered(
        which in any::<prop::sample::Index>(),
        t in 0usize..288,
        head_v in 0.97f64..1.03,
    ) {
        let all = bundled();
        let (grid, fi) = &all[which.index(all.len())];
        let state = snapshot_at(grid, t % grid.horizon()).unwrap();
        let controls = ControlVector::initial(grid);
        let r = DmsController::new(*fi).report(grid, &state, &controls, head_v).unwrap();
        prop_assert!(r.p_min <= r.p_forecast && r.p_forecast <= r.p_max, "{:?}", r);
        prop_assert!(r.q_min <= r.q_forecast && r.q_forecast <= r.q_max, "{:?}", r);
        prop_assert!(r.pv_curtailable >= 0.0 && r.dr_up >= 0.0 && r.dr_down >= 0.0);
    }
}
