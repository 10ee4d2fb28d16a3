use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relaymon::net_io::{CaptureWriter, LINKTYPE_RAW};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relaymon"));
    // keep the caller's environment from leaking into flag defaults
    for (k, _) in std::env::vars() {
        if k.starts_with("RELAYMON_") {
            c.env_remove(k);
        }
    }
    c
}

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/scenarios/reference.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["report"]).status.code(), Some(1));
    assert_eq!(run(&["--timeout-ms", "0", "replay", "x.pcap"]).status.code(), Some(1));
    assert_eq!(run(&["--resolver", "magic", "replay", "x.pcap"]).status.code(), Some(1));
    let o = bin().args(["replay", "x.pcap"]).env("RELAYMON_TIMEOUT_MS", "soon").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_validates_before_touching_the_tunnel() {
    let o = run(&["run", "--tunnel", "rmcli0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--store"), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pcap");
    assert_eq!(run(&["replay", missing.to_str().unwrap()]).status.code(), Some(2));
    let junk = dir.path().join("junk.pcap");
    std::fs::write(&junk, b"definitely not a capture file").unwrap();
    let o = run(&["replay", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"endpoints": [], "bogus_field": 1}"#).unwrap();
    assert_eq!(run(&["simulate", "--scenario", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn defaults_are_printed_and_env_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cap = dir.path().join("empty.pcap");
    CaptureWriter::create(&cap, LINKTYPE_RAW).unwrap().finish().unwrap();
    let o = run(&["replay", cap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let err = stderr(&o);
    for needle in ["network_tag=unlabeled", "timeout_ms=3000", "format=text", "resolver=platform", "strict_checksums=false"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    let o = bin().args(["replay", cap.to_str().unwrap()]).env("RELAYMON_NETWORK_TAG", "4g").env("RELAYMON_FORMAT", "json").output().unwrap();
    assert!(stderr(&o).contains("network_tag=4g"));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["handshakes"].as_array().unwrap().len(), 0);
}

#[test]
fn simulate_is_stable_and_hermetic() {
    let dir = tempfile::tempdir().unwrap();
    let out = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let scen = reference();
    let s = scen.to_str().unwrap();
    let a = run(&["--format", "json", "simulate", "--scenario", s, "--out", &out("a.jsonl"), "--pcap", &out("a.pcap")]);
    let b = run(&["--format", "json", "simulate", "--scenario", s, "--out", &out("b.jsonl")]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(std::fs::read(out("a.jsonl")).unwrap(), std::fs::read(out("b.jsonl")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(v["audit_passed"], true);
    let rtts: Vec<u64> = v["flows"].as_array().unwrap().iter().filter_map(|f| f["rtt_ns"].as_u64()).collect();
    assert_eq!(&rtts[..3], &[4_260_000, 36_550_000, 284_850_000]);

    // the capture replays to the same handshake times
    let r = run(&["--format", "csv", "replay", &out("a.pcap")]);
    let text = stdout(&r);
    for ns in ["4260000", "36550000", "284850000"] {
        assert!(text.lines().any(|l| l.ends_with(ns)), "{ns} not in {text}");
    }
    assert!(text.contains("192.0.2.1:80,,,"), "unanswered flow missing: {text}");
}

#[test]
fn compare_direct_meter_is_exact_in_simulation() {
    let s = reference();
    let o = run(&["--format", "json", "compare", "--scenario", s.to_str().unwrap(), "--runs", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let direct = v["direct"].as_array().unwrap();
    assert_eq!(direct.len(), 3);
    assert!(direct.iter().all(|r| r["delta_ms"].as_f64() == Some(0.0) && r["runs"] == 5));
    assert!(v["baseline"].as_array().unwrap().iter().all(|r| r["delta_ms"].as_f64().unwrap() > 1.0));
}

#[test]
fn report_views_and_cdf_from_a_simulated_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("events.jsonl");
    let st = store.to_str().unwrap();
    let s = reference();
    for _ in 0..2 {
        let o = run(&["--store", st, "simulate", "--scenario", s.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }

    let all = stdout(&run(&["--store", st, "report"]));
    let first = all.lines().nth(1).unwrap();
    assert!(first.starts_with("chrome") && first.contains(" 4 "), "{all}");

    let one = stdout(&run(&["--store", st, "report", "--app", "chrome"]));
    assert!(one.contains("destination") && one.contains("216.58.221.132") && one.contains("106.10.138.240"), "{one}");

    let v: serde_json::Value = serde_json::from_str(&stdout(&run(&["--store", st, "--format", "json", "report", "--app", "WeChat"]))).unwrap();
    assert_eq!(v["failures"]["TIMEOUT"], 2);
    assert_eq!(v["diagnoses"]["DNS_MISCONFIG"], 2);

    let cdf = dir.path().join("wifi.csv");
    let o = run(&["--store", st, "report", "--cdf", "--tag", "wifi", "--out", cdf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&cdf).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last.split(',').nth(1), Some("1"), "{text}");
    assert_eq!(run(&["--store", st, "report", "--cdf", "--tag", "4g"]).status.code(), Some(2));
    assert_eq!(run(&["--store", st, "report", "--app", "nobody"]).status.code(), Some(2));
}

#[test]
fn map_resolver_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("e.jsonl");
    let o = run(&["--store", store.to_str().unwrap(), "--resolver", "map:/nonexistent/apps.json", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("app map"), "{}", stderr(&o));
    assert!(!store.exists(), "store created before the resolver failed");
}
