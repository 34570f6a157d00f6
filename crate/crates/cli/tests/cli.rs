use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(format!("{name}.json"))
}

fn fademac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fademac"))
        .args(args)
        .env_remove("FADEMAC_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const ONE_LINK: &str = r#"{
  "nodes": [{"id": 0, "noise_var": 1.0}, {"id": 1, "noise_var": 1.0}],
  "links": [{"tail": 0, "head": 1, "variance": 0.5, "power": 1.0}],
  "source": 0,
  "destinations": [1],
  "multicast_rate": 1.0
}"#;

#[test]
fn exit_codes_for_usage_errors() {
    assert_eq!(fademac(&["--help"]).status.code(), Some(0));
    assert_eq!(fademac(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fademac(&["solve", "/nonexistent/net.json"]).status.code(), Some(1));
    let bad = fademac(&["outage", fixture("diamond").to_str().unwrap(), "/nonexistent/rates.json"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("rates.json"), "{}", stderr(&bad));
}

#[test]
fn single_link_exact_outage() {
    let dir = tempfile::tempdir().unwrap();
    let net = write(&dir, "net.json", ONE_LINK);
    let rates = write(&dir, "rates.json", r#"{"rates": [{"tail": 0, "head": 1, "rate": 1.0}]}"#);
    let out = fademac(&["outage", &net, &rates, "--method", "exact"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    // lambda = 1, 2^1 - 1 = 1: outage 1 - e^{-1}
    assert!(stdout(&out).contains("0.632121"), "{}", stdout(&out));

    let out = fademac(&["outage", &net, &rates, "--method", "mc", "--trials", "200000", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let p = v["total"]["value"].as_f64().unwrap();
    let se = v["total"]["std_error"].as_f64().unwrap();
    assert!((p - (1.0 - (-1f64).exp())).abs() <= 4.0 * se, "{p} +/- {se}");
}

#[test]
fn zero_rates_give_zero_outage() {
    let dir = tempfile::tempdir().unwrap();
    let rates = write(&dir, "zero.json", r#"{"rates": []}"#);
    let net = fixture("diamond");
    for method in ["exact", "lower", "upper", "weak", "mc"] {
        let out = fademac(&["outage", net.to_str().unwrap(), &rates, "--method", method, "--json"]);
        assert_eq!(out.status.code(), Some(0), "{method}: {}", stderr(&out));
        let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(v["total"]["value"].as_f64(), Some(0.0), "{method}");
    }
}

#[test]
fn three_link_receiver_has_no_exact_value() {
    let dir = tempfile::tempdir().unwrap();
    let rates = write(
        &dir,
        "rates.json",
        r#"{"rates": [{"tail": 2, "head": 1, "rate": 0.5}, {"tail": 3, "head": 1, "rate": 0.5}, {"tail": 6, "head": 1, "rate": 0.5}]}"#,
    );
    let net = fixture("twelve-node");
    let out = fademac(&["outage", net.to_str().unwrap(), &rates, "--method", "exact"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("receiver 1 has 3 links") && err.contains("use bounds or mc"), "{err}");
    // the bounds handle it
    let out = fademac(&["outage", net.to_str().unwrap(), &rates, "--method", "upper"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn round_cap_exits_two_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let out = fademac(&[
        "solve",
        fixture("diamond").to_str().unwrap(),
        "--mode",
        "distributed",
        "--max-rounds",
        "1",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let text = std::fs::read_to_string(&trace).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,objective,max_flow_violation,max_dual,clamp_events");
    assert_eq!(lines.len(), 3);
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["status"], "round-cap");
}

#[test]
fn modes_agree_and_report_is_a_rates_file() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("diamond");
    let net = net.to_str().unwrap();
    let central = fademac(&["solve", net]);
    assert_eq!(central.status.code(), Some(0), "{}", stderr(&central));
    let distributed = fademac(&["solve", net, "--mode", "distributed"]);
    assert_eq!(distributed.status.code(), Some(0), "{}", stderr(&distributed));
    let c: Value = serde_json::from_str(&stdout(&central)).unwrap();
    let d: Value = serde_json::from_str(&stdout(&distributed)).unwrap();
    let (oc, od) = (c["objective"].as_f64().unwrap(), d["objective"].as_f64().unwrap());
    assert!((oc - 8.0).abs() < 1e-6, "{oc}");
    assert!((od - oc).abs() / oc < 1e-3, "{od} vs {oc}");
    assert_eq!(d["converged"], true);
    assert!(d["messages"].as_u64().unwrap() > 0);

    let report = write(&dir, "solution.json", &stdout(&central));
    let out = fademac(&["outage", net, &report, "--method", "exact", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let p = v["total"]["value"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0, "{p}");
}

struct Row {
    sweep: f64,
    lower: f64,
    upper: f64,
    mc: f64,
}

fn parse_curve(text: &str) -> Vec<Row> {
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sweep_value,R_s,outage_lower,outage_upper,outage_mc,mc_halfwidth,objective"
    );
    lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            Row { sweep: f[0], lower: f[2], upper: f[3], mc: f[4] }
        })
        .collect()
}

/// Agresti-Coull standard error.
fn std_error(p: f64, trials: u64) -> f64 {
    let n = trials as f64 + 4.0;
    let adjusted = (p * trials as f64 + 2.0) / n;
    (adjusted * (1.0 - adjusted) / n).sqrt()
}

#[test]
fn curve_rows_are_sandwiched_and_monotone() {
    let trials = 20_000;
    let out = fademac(&[
        "curve",
        fixture("butterfly").to_str().unwrap(),
        "--sweep",
        "multicast-rate",
        "--lo",
        "0.5",
        "--hi",
        "3",
        "--step",
        "0.5",
        "--trials",
        &trials.to_string(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = parse_curve(&stdout(&out));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let se = std_error(r.mc, trials);
        assert!(r.lower <= r.mc + 4.0 * se && r.mc <= r.upper + 4.0 * se, "at {}", r.sweep);
    }
    for w in rows.windows(2) {
        assert!(w[1].lower >= w[0].lower && w[1].upper >= w[0].upper);
    }

    let out = fademac(&[
        "curve",
        fixture("diamond").to_str().unwrap(),
        "--sweep",
        "snr",
        "--lo",
        "-5",
        "--hi",
        "20",
        "--step",
        "5",
        "--methods",
        "lower,upper",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let upper: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(upper.windows(2).all(|w| w[1] <= w[0]), "{upper:?}");
    assert!(rows.iter().all(|r| r[4].is_empty() && r[5].is_empty()));
}

#[test]
fn seed_from_environment_is_deterministic() {
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_fademac"))
            .args(["curve", fixture("diamond").to_str().unwrap(), "--sweep", "multicast-rate"])
            .args(["--lo", "1", "--hi", "2", "--step", "0.5", "--methods", "mc", "--trials", "5000"])
            .env("FADEMAC_SEED", seed)
            .output()
            .unwrap()
    };
    let (a, b, c) = (run("7"), run("7"), run("8"));
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);

    // an explicit flag beats the environment
    let flag = Command::new(env!("CARGO_BIN_EXE_fademac"))
        .args(["curve", fixture("diamond").to_str().unwrap(), "--sweep", "multicast-rate"])
        .args(["--lo", "1", "--hi", "2", "--step", "0.5", "--methods", "mc", "--trials", "5000", "--seed", "7"])
        .env("FADEMAC_SEED", "8")
        .output()
        .unwrap();
    assert_eq!(flag.stdout, a.stdout);
}

#[test]
fn empty_sweep_is_an_input_error() {
    let out = fademac(&[
        "curve",
        fixture("diamond").to_str().unwrap(),
        "--sweep",
        "snr",
        "--lo",
        "10",
        "--hi",
        "0",
        "--step",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("empty sweep range"), "{}", stderr(&out));
}
