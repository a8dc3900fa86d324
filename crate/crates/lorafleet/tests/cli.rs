use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn lorafleet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorafleet"))
        .args(args)
        .env("LORAFLEET_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok_json(root: &Path, args: &[&str]) -> Value {
    let out = lorafleet(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?}: {e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_domain_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lorafleet(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(lorafleet(dir.path(), &["pack"]).status.code(), Some(2));
    assert_eq!(lorafleet(dir.path(), &["--help"]).status.code(), Some(0));
    let out = lorafleet(dir.path(), &["audit-file", "--file", "/nonexistent/x.mtpk"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io_error]"));
}

#[test]
fn fixture_pack_audit_unpack_measure() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let fan = root.join("fan");
    let packed = root.join("a.mtpk");
    let fx = ok_json(root, &["fixture", "--out", s(&fan), "--layers", "3", "--experts", "8", "--projections", "3", "--others", "12", "--seed", "5"]);
    assert_eq!(fx["tensors"], 3 * 8 * 3 * 2 + 12);
    let p = ok_json(root, &["pack", "--in", s(&fan), "--out", s(&packed)]);
    assert_eq!(p["keys_out"], 3 * 3 * 2 + 12);
    assert_eq!(p["groups"], 18);
    assert_eq!(p["copied"], 12);
    let a = ok_json(root, &["audit-file", "--file", s(&packed), "--samples", "8"]);
    assert_eq!(a["sampled_ok"], 8);

    let back = root.join("back");
    ok_json(root, &["unpack", "--in", s(&packed), "--out", s(&back)]);
    let repacked = root.join("b.mtpk");
    ok_json(root, &["pack", "--in", s(&back), "--out", s(&repacked)]);
    assert_eq!(std::fs::read(&packed).unwrap(), std::fs::read(&repacked).unwrap());

    let m = ok_json(root, &["measure", "--fanout", s(&fan), "--packed", s(&packed)]);
    assert_eq!(m["original"]["object_count"], 156);
    assert_eq!(m["packed"]["object_count"], 30);
}

#[test]
fn catalog_store_and_fleet_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let b = ok_json(root, &["catalog", "build", "--shards", "3", "--per-shard", "4", "--register"]);
    assert_eq!((b["built_count"].as_u64(), b["registered"].as_u64()), (Some(12), Some(12)));
    let a = ok_json(root, &["catalog", "audit", "--samples", "6"]);
    assert_eq!((a["ok"].as_u64(), a["shards_covered"].as_u64()), (Some(6), Some(3)));
    let st = ok_json(root, &["store", "inspect"]);
    assert_eq!(st["entries"], 24);
    assert_eq!(st["torn_tail"], false);
    let gc = ok_json(root, &["store", "gc"]);
    assert!(gc["removed"].as_array().unwrap().is_empty());

    let f = ok_json(root, &["fleet-size"]);
    let pairs: Vec<(u64, u64)> =
        f["rows"].as_array().unwrap().iter().map(|r| (r["engines"].as_u64().unwrap(), r["gpus"].as_u64().unwrap())).collect();
    for want in [(36, 144), (55, 220), (72, 288)] {
        assert!(pairs.contains(&want), "{pairs:?}");
    }
}

#[test]
fn trainsim_and_probe_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let t = ok_json(root, &["trainsim", "run", "--plans", "4b", "--out", s(&root.join("ts"))]);
    let speedup = t["speedup"].as_f64().unwrap();
    assert!((1.5..=2.0).contains(&speedup));
    assert!(root.join("ts/sequential.csv").exists() && root.join("ts/concurrent.csv").exists());

    let spec = root.join("stair.json");
    std::fs::write(&spec, r#"{"kind":"staircase","count":16,"seed":0}"#).unwrap();
    let actor = root.join("actor.json");
    std::fs::write(&actor, r#"{"max_inflight":1,"queue_depth":15,"admission":{"kind":"unlimited"}}"#).unwrap();
    let out = root.join("probe");
    let m = ok_json(root, &["probe", "run", "--spec", s(&spec), "--actor", s(&actor), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("traces.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "request_id,policy,arrival_ms,path,ttft_ms,e2e_ms,load_ms");
    assert_eq!(csv.lines().count(), 17);
    let r = ok_json(root, &["probe", "report", "--traces", s(&out), "--config", s(&actor)]);
    for k in ["p50", "p95", "p99", "slo_attainment"] {
        assert_eq!(r[k], m[k], "{k}");
    }

    let ladder = root.join("ladder.json");
    std::fs::write(&ladder, r#"{"kind":"unique_ladder","targets":[8,16],"concurrency":4,"seed":1}"#).unwrap();
    let l = ok_json(root, &["probe", "run", "--spec", s(&ladder), "--out", s(&root.join("lad"))]);
    assert_eq!(l.as_array().unwrap().len(), 2);
    assert!(root.join("lad/ladder.json").exists());
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_and_client_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lorafleet"))
        .args(["serve", "--listen", "127.0.0.1:0", "--tick-ms", "10"])
        .env("LORAFLEET_ROOT", root)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    let url = format!("http://{addr}");

    ok_json(root, &["client", "--url", &url, "register-worker", "--role", "trainer", "--base", "b", "--max-rank", "8", "--modules", "q_proj,v_proj"]);
    let sub = ok_json(root, &["client", "--url", &url, "submit", "--kind", "create_policy", "--payload", r#"{"base_id":"b","rank":2,"target_modules":["q_proj"]}"#]);
    let op = sub["op_id"].as_str().unwrap().to_string();
    let mut polled = Value::Null;
    for _ in 0..200 {
        polled = ok_json(root, &["client", "--url", &url, "poll", &op]);
        if polled["status"] == "committed" {
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(20));
    }
    assert_eq!(polled["status"], "committed");
    let policy = polled["result"]["policy_id"].as_str().unwrap();
    let view = ok_json(root, &["client", "--url", &url, "policy", policy]);
    assert_eq!(view["policy"]["base_id"], "b");

    let bad = lorafleet(root, &["client", "--url", &url, "submit", "--kind", "train_step", "--payload", r#"{"policy_id":"policy/none"}"#]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error[unknown_policy]"));
}
