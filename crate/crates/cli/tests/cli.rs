use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tdvvc::coordinator::{IntervalRecord, MetricsSummary};

const ARTIFACTS: [&str; 4] = ["intervals.jsonl", "summary.json", "trace.jsonl", "metrics.csv"];

fn tdvvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdvvc")).args(args).env_remove("TDVVC_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tdvvc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn records(dir: &Path) -> Vec<IntervalRecord> {
    fs::read_to_string(dir.join("intervals.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn summary(dir: &Path) -> MetricsSummary {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn sweep_rows(dir: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["value", "mean_x", "deadline_miss_rate", "total_losses", "violation_intervals"]
    );
    rdr.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect()
}

fn col(rows: &[Vec<String>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i].parse().unwrap()).collect()
}

#[test]
fn benign_run_writes_four_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stdout = ok(&["run", "--scenario", "two_bus", "--set", "horizon=12", "--out", p(&out)]);
    assert!(stdout.contains("12 intervals"), "{stdout}");
    for f in ARTIFACTS {
        assert!(out.join(f).is_file(), "{f}");
    }
    let recs = records(&out);
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r.x_elapsed_s == 270.0 && r.deadline_met));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 13);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,0,270,30,true,false,"), "{metrics}");
}

#[test]
fn run_from_a_bundle_directory() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["bundle", "three_bus", "--out", p(tmp.path())]);
    let bundle = tmp.path().join("three_bus");
    for f in ["scenario.json", "loads.csv", "pv.csv"] {
        assert!(bundle.join(f).is_file(), "{f}");
    }
    let out = tmp.path().join("run");
    ok(&["run", "--scenario", p(&bundle), "--out", p(&out)]);
    assert_eq!(summary(&out).intervals, 12);
}

#[test]
fn cyclic_bundle_fails_naming_the_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["bundle", "two_bus", "--out", p(tmp.path())]);
    let bundle = tmp.path().join("two_bus");
    let path = bundle.join("scenario.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let branches = doc["feeders"][0]["branches"].as_array_mut().unwrap();
    let mut back = branches[0].clone();
    back["id"] = "L1-S".into();
    back["from"] = "L1".into();
    back["to"] = "S".into();
    branches.push(back);
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let out = tdvvc(&["run", "--scenario", p(&bundle), "--out", p(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cycle") && stderr.contains("F1"), "{stderr}");
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn unknown_scenario_and_bad_override_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tdvvc(&["run", "--scenario", "nowhere", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    let out = tdvvc(&["run", "--scenario", "two_bus", "--set", "budget.interval_s=-5", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("interval_s"));
    let out = tdvvc(&["sweep", "--scenario", "two_bus", "--axis", "colour", "--values", "1", "--out", p(tmp.path())]);
    assert!(!out.status.success());
}

#[test]
fn same_manifest_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["run", "--scenario", "two_feeder", "--seed", "9", "--set", "horizon=24", "--set", "latency_scale=4", "--set", "loss_prob=0.1", "--out", p(&a)]);
    ok(&["run", "--manifest", p(&a.join("manifest.json")), "--out", p(&b)]);
    for f in ["intervals.jsonl", "trace.jsonl", "summary.json", "metrics.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ma: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["artifacts"], mb["artifacts"]);
    assert_eq!(ma["seed"], 9);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tdvvc"))
        .args(["run", "--scenario", "islands", "--set", "horizon=2"])
        .env("TDVVC_OUT", tmp.path().join("env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("env").join("summary.json").is_file());
}

#[test]
fn latency_sweep_degrades_monotonically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--scenario", "two_feeder", "--set", "horizon=48", "--axis", "latency-scale", "--values", "1,2,4,8", "--out", p(&out)]);
    let rows = sweep_rows(&out);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "2", "4", "8"]);
    let x = col(&rows, 1);
    assert!(x.windows(2).all(|w| w[0] <= w[1]), "{x:?}");
    for v in ["1", "2", "4", "8"] {
        assert!(out.join(format!("latency-scale={v}")).join("intervals.jsonl").is_file());
    }
}

#[test]
fn longer_intervals_never_miss_more() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    ok(&[
        "sweep", "--scenario", "two_feeder", "--set", "horizon=48", "--set", "latency_scale=12",
        "--axis", "interval_s", "--values", "300,600,900", "--out", p(&out),
    ]);
    let miss = col(&sweep_rows(&out), 2);
    assert!(miss[0] > 0.0, "{miss:?}");
    assert!(miss.windows(2).all(|w| w[0] >= w[1]), "{miss:?}");
}

#[test]
fn der_count_loss_and_group_axes_run() {
    let tmp = tempfile::tempdir().unwrap();
    for (scenario, axis, values) in [("ieee33_high_pv", "der-count", "0,3,6"), ("two_feeder", "loss_prob", "0,1"), ("two_feeder", "groups", "1,2")] {
        let out = tmp.path().join(axis);
        ok(&["sweep", "--scenario", scenario, "--set", "horizon=6", "--axis", axis, "--values", values, "--out", p(&out)]);
        assert_eq!(sweep_rows(&out).len(), values.split(',').count());
    }
    let loss = col(&sweep_rows(&tmp.path().join("loss_prob")), 2);
    assert_eq!(loss, vec![0.0, 1.0]);
}

#[test]
fn single_value_sweep_equals_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let sweep = tmp.path().join("sweep");
    ok(&["run", "--scenario", "two_feeder", "--set", "horizon=12", "--set", "latency.scale=3", "--out", p(&run)]);
    ok(&["sweep", "--scenario", "two_feeder", "--set", "horizon=12", "--axis", "latency-scale", "--values", "3", "--out", p(&sweep)]);
    let s = summary(&run);
    let rows = sweep_rows(&sweep);
    assert_eq!(rows.len(), 1);
    assert_eq!(col(&rows, 1)[0], s.mean_x_s);
    assert_eq!(col(&rows, 2)[0], s.deadline_miss_rate);
    assert_eq!(col(&rows, 3)[0], s.total_losses);
    assert_eq!(col(&rows, 4)[0], s.violation_intervals as f64);
    let inner = sweep.join("latency-scale=3");
    assert_eq!(fs::read(run.join("intervals.jsonl")).unwrap(), fs::read(inner.join("intervals.jsonl")).unwrap());
}

#[test]
fn report_tables_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    ok(&["run", "--scenario", "two_bus", "--set", "horizon=3", "--out", p(&good)]);
    let text = ok(&["report", p(&good)]);
    let rows: Vec<&str> = text.lines().skip(1).take(3).collect();
    for r in &rows {
        assert!(r.contains("270.000") && r.contains("30.000") && !r.contains("CARRIED_OVER"), "{r}");
    }
    assert!(text.contains("mean x (s)           270.000"), "{text}");

    let slow = tmp.path().join("slow");
    ok(&["run", "--scenario", "two_bus", "--set", "horizon=3", "--set", "budget.ems_solve_s=400", "--out", p(&slow)]);
    let text = ok(&["report", p(&slow)]);
    assert_eq!(text.lines().filter(|l| l.contains("CARRIED_OVER")).count(), 3, "{text}");

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = tdvvc(&["report", p(&empty)]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    for f in ARTIFACTS {
        assert!(stderr.contains(f), "{stderr}");
    }
}

#[test]
fn vlsm_csv_has_one_row_per_bus_pair() {
    let text = ok(&["vlsm", "--scenario", "ieee33_high_pv", "--feeder", "F33", "--interval", "144"]);
    assert_eq!(text.lines().next(), Some("row_bus,col_bus,s_p,s_q"));
    assert_eq!(text.lines().count(), 1 + 32 * 32);
}

#[test]
fn checked_in_bundles_match_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for dir in tdvvc_cli::cmd_bundle(None, tmp.path()).unwrap() {
        let name = dir.file_name().unwrap();
        for f in ["scenario.json", "loads.csv", "pv.csv"] {
            let fresh = fs::read(dir.join(f)).unwrap();
            let stored = fs::read(repo.join(name).join(f)).unwrap_or_else(|e| panic!("{name:?}/{f}: {e}"));
            assert!(fresh == stored, "scenarios/{}/{f} is out of date; rerun `tdvvc bundle --out scenarios`", name.to_string_lossy());
        }
    }
}
