mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use safearm_cli::runner::{blob_hash, fuzz_combos, policy_seed};
use safearm_cli::{run, run_with, AgentKind, Mode, RunSpec};
use safearm_rl::scenario::assets_dir;
use safearm_rl::train::episode_seed;
use safearm_rl::{Env, RandomPolicy, Scenario, TrainConfig, Trainer};
use serde_json::{json, Value};

const TIMING: [&str; 3] = ["tick_mean_us", "tick_median_us", "tick_p99_us"];

fn scenario(name: &str) -> PathBuf {
    Scenario::bundled(name)
}

fn spec(name: &str, mode: Mode, out: &Path) -> RunSpec {
    let mut s = RunSpec::new(scenario(name), mode, out);
    s.seed = 3;
    s
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            header
                .iter()
                .cloned()
                .zip(rec.unwrap().iter().map(String::from))
                .collect()
        })
        .collect();
    (header, rows)
}

/// The CSV with its timing columns removed.
fn without_timing(path: &Path) -> String {
    let (header, rows) = read_csv(path);
    let keep: Vec<&String> = header.iter().filter(|h| !TIMING.contains(&h.as_str())).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<&str> = keep.iter().map(|h| row[*h].as_str()).collect();
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

fn events(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Rates and mean length recomputed from the episode events must equal the
/// CSV values exactly.
fn audit_csv_against_events(dir: &Path, epochs: usize, per_epoch: usize) {
    let (header, rows) = read_csv(&dir.join("metrics.csv"));
    assert_eq!(
        header,
        [
            "epoch",
            "success_rate",
            "unsafe_collision_rate",
            "safe_collision_rate",
            "timeout_rate",
            "mean_episode_steps",
            "tick_mean_us",
            "tick_median_us",
            "tick_p99_us"
        ]
    );
    assert_eq!(rows.len(), epochs);
    let ev = events(dir);
    for (e, row) in rows.iter().enumerate() {
        assert_eq!(row["epoch"], e.to_string());
        let eps: Vec<&Value> = ev
            .iter()
            .filter(|v| v["event"] == "episode" && v["epoch"] == e)
            .collect();
        assert_eq!(eps.len(), per_epoch);
        let n = eps.len() as f64;
        let rate = |reason: &str| eps.iter().filter(|v| v["reason"] == reason).count() as f64 / n;
        let get = |k: &str| row[k].parse::<f64>().unwrap();
        assert_eq!(get("success_rate"), rate("goal_reached"));
        assert_eq!(get("unsafe_collision_rate"), rate("unsafe_collision"));
        assert_eq!(get("safe_collision_rate"), rate("safe_collision"));
        assert_eq!(get("timeout_rate"), rate("timeout"));
        let steps: f64 = eps.iter().map(|v| v["steps"].as_u64().unwrap() as f64).sum();
        assert_eq!(get("mean_episode_steps"), steps / n);
        let sum = ["success_rate", "unsafe_collision_rate", "safe_collision_rate", "timeout_rate"]
            .iter()
            .map(|k| get(k))
            .sum::<f64>();
        assert!((sum - 1.0).abs() < 1e-9);
        let epoch_event = ev
            .iter()
            .find(|v| v["event"] == "epoch" && v["epoch"] == e)
            .unwrap();
        assert_eq!(epoch_event["success_rate"].as_f64().unwrap(), get("success_rate"));
    }
}

#[test]
fn metrics_csv_is_reproduced_from_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("randomized_goal", Mode::Evaluate, dir.path());
    s.epochs = Some(3);
    s.episodes_per_epoch = Some(4);
    s.max_steps = Some(12);
    let summary = run(&s).unwrap();
    assert_eq!(summary.metrics.len(), 3);
    assert_eq!(summary.episodes, 12);
    audit_csv_against_events(dir.path(), 3, 4);
    // episode seeds follow the run seed
    let seeds: Vec<u64> = events(dir.path())
        .iter()
        .filter(|v| v["event"] == "episode")
        .map(|v| v["seed"].as_u64().unwrap())
        .collect();
    let expected: Vec<u64> = (0..12).map(|i| episode_seed(3, i)).collect();
    assert_eq!(seeds, expected);
}

#[test]
fn identical_specs_give_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, 3), (&b, 3), (&c, 4)] {
        let mut s = spec("human_evasion", Mode::Evaluate, dir.path());
        s.seed = seed;
        s.epochs = Some(2);
        s.episodes_per_epoch = Some(3);
        s.max_steps = Some(15);
        run(&s).unwrap();
    }
    let csv = |d: &tempfile::TempDir| without_timing(&d.path().join("metrics.csv"));
    assert_eq!(csv(&a), csv(&b));
    let episodes = |d: &tempfile::TempDir| -> Vec<Value> {
        events(d.path())
            .into_iter()
            .filter(|v| v["event"] == "episode")
            .collect()
    };
    assert_eq!(episodes(&a), episodes(&b));
    assert_ne!(episodes(&a), episodes(&c));
    let manifest = |d: &tempfile::TempDir| -> Value {
        serde_json::from_str(&std::fs::read_to_string(d.path().join("manifest.json")).unwrap())
            .unwrap()
    };
    assert_eq!(
        manifest(&a)["inputs"],
        manifest(&b)["inputs"],
        "input hashes are stable"
    );
}

#[test]
fn manifest_hashes_are_git_style() {
    // known SHA-256 object ids of git
    assert_eq!(
        blob_hash(b""),
        "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
    );
    assert_eq!(
        blob_hash(b"hello world\n"),
        "0bd69098bd9b9cc5934a610ab65da429b525361147faa7b5b922919e9a23143d"
    );
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("randomized_goal", Mode::Evaluate, dir.path());
    s.episodes_per_epoch = Some(1);
    s.max_steps = Some(2);
    run(&s).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let mut m: Value = serde_json::from_str(&text).unwrap();
    let roles: Vec<&str> = m["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["scenario", "robot", "human_model", "human_motion"]);
    for input in m["inputs"].as_array().unwrap() {
        let bytes = std::fs::read(input["path"].as_str().unwrap()).unwrap();
        assert_eq!(input["blob_sha256"], blob_hash(&bytes));
    }
    assert_eq!(m["spec"]["seed"], 3);
    let hash = m.as_object_mut().unwrap().remove("content_hash").unwrap();
    assert_eq!(hash, blob_hash(m.to_string().as_bytes()));
}

#[test]
fn shielded_random_evaluation_has_no_unsafe_collisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("human_evasion", Mode::Evaluate, dir.path());
    s.max_steps = Some(20);
    let summary = run(&s).unwrap();
    assert_eq!(summary.episodes, 100);
    assert_eq!(summary.unsafe_contacts, 0);
    assert_eq!(summary.metrics[0].unsafe_collision_rate, 0.0);
    audit_csv_against_events(dir.path(), 1, 100);
}

#[test]
fn unshielded_baseline_collides() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("human_evasion", Mode::Evaluate, dir.path());
    s.shield = Some(false);
    s.episodes_per_epoch = Some(30);
    let summary = run(&s).unwrap();
    assert!(summary.metrics[0].unsafe_collision_rate > 0.0);
    assert!(summary.unsafe_contacts > 0);
}

#[test]
fn benchmark_reports_the_tick_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("randomized_goal", Mode::BenchmarkShield, dir.path());
    s.episodes_per_epoch = Some(3);
    s.max_steps = Some(10);
    run(&s).unwrap();
    let b: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("benchmark.json")).unwrap())
            .unwrap();
    assert_eq!(b["episodes"], 3);
    assert!(b["ticks"].as_u64().unwrap() > 0);
    let med = b["tick_median_us"].as_f64().unwrap();
    let p99 = b["tick_p99_us"].as_f64().unwrap();
    assert!(0.0 < med && med <= p99 && p99 <= b["tick_max_us"].as_f64().unwrap());
    assert_eq!(b["tick_budget_us"], 4000.0);
    assert!(b["realtime_factor"].as_f64().unwrap() > 0.0);

    s.shield = Some(false);
    assert!(run(&s).is_err());
}

#[test]
fn fuzz_covers_every_pairing_and_ignores_the_thread_count() {
    let combos = fuzz_combos(&Scenario::load(scenario("randomized_goal")).unwrap());
    assert_eq!(combos.len(), 12);
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec("randomized_goal", Mode::FuzzSafety, dir.path());
        s.episodes_per_epoch = Some(12);
        s.epochs = Some(2);
        s.max_steps = Some(6);
        s.threads = Some(threads);
        let summary = run(&s).unwrap();
        assert_eq!(summary.exit_code, 0);
        assert_eq!(summary.unsafe_contacts, 0);
        audit_csv_against_events(dir.path(), 2, 12);
        let report: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("fuzz.json")).unwrap())
                .unwrap();
        assert_eq!(report["episodes"], 24);
        for c in report["combos"].as_array().unwrap() {
            assert_eq!(c["episodes"], 2);
        }
        outputs.push((
            without_timing(&dir.path().join("metrics.csv")),
            std::fs::read_to_string(dir.path().join("fuzz.json")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn invalid_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("randomized_goal", Mode::Evaluate, dir.path());
    s.scenario = dir.path().join("missing.toml");
    assert!(run(&s).is_err());

    let mut s = spec("randomized_goal", Mode::Evaluate, dir.path());
    s.epochs = Some(0);
    assert!(run(&s).is_err());

    let mut s = spec("randomized_goal", Mode::FuzzSafety, dir.path());
    s.agent = AgentKind::External;
    assert!(run(&s).is_err());

    let mut s = spec("randomized_goal", Mode::FuzzSafety, dir.path());
    s.shield = Some(false);
    assert!(run(&s).is_err());
}

fn write_train_config(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        start_steps: 30,
        update_after: 40,
        update_every: 20,
        n_epochs: 3,
        episodes_per_epoch: 3,
        max_episode_steps: 12,
        batch_size: 8,
        buffer_capacity: 5000,
        ..TrainConfig::default()
    };
    let path = dir.join("train.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn training_resumes_from_its_checkpoint() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let cfg_path = write_train_config(cfg_dir.path());
    let cfg: TrainConfig = toml::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();

    let full = tempfile::tempdir().unwrap();
    let mut s = spec("one_dof_reach", Mode::Train, full.path());
    s.train_config = Some(cfg_path.clone());
    let summary = run(&s).unwrap();
    assert_eq!(summary.metrics.len(), 3);
    assert!(full.path().join("checkpoint.json").exists());
    audit_csv_against_events(full.path(), 3, 3);

    // an interrupted run: one epoch written by the library, the rest by the runner
    let part = tempfile::tempdir().unwrap();
    {
        let mut env = Env::load(scenario("one_dof_reach")).unwrap();
        let mut p = RandomPolicy::new(1, policy_seed(3));
        let mut t = Trainer::new(cfg, 3).unwrap();
        t.run(
            &mut env,
            &mut p,
            &mut (),
            Some(&part.path().join("checkpoint.json")),
            Some(1),
        )
        .unwrap();
    }
    let mut s2 = s.clone();
    s2.out = part.path().to_path_buf();
    s2.resume = true;
    let resumed = run(&s2).unwrap();
    assert_eq!(resumed.metrics.len(), 3);
    assert_eq!(resumed.episodes, 6);
    assert_eq!(
        without_timing(&part.path().join("metrics.csv")),
        without_timing(&full.path().join("metrics.csv"))
    );

    // a checkpoint from another run is refused
    let mut s3 = s2.clone();
    s3.seed = 4;
    assert!(run(&s3).is_err());
}

#[test]
fn external_agent_matches_the_builtin_scripted_agent() {
    let builtin = tempfile::tempdir().unwrap();
    let mut s = spec("randomized_goal", Mode::Evaluate, builtin.path());
    s.agent = AgentKind::Scripted;
    s.epochs = Some(2);
    s.episodes_per_epoch = Some(2);
    s.max_steps = Some(15);
    run(&s).unwrap();

    for misbehave in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let mut x = s.clone();
        x.out = dir.path().to_path_buf();
        x.agent = AgentKind::External;
        x.endpoint = "127.0.0.1:0".into();
        x.timeout_ms = 20_000;
        let (tx, rx) = std::sync::mpsc::channel();
        let client = std::thread::spawn(move || {
            let addr = rx.recv().unwrap();
            common::Agent::connect(addr).serve(|req, i| {
                if req["type"] != "act" {
                    return None;
                }
                assert_eq!(req["obs"].as_array().unwrap().len(), 2 * 6 + 12);
                assert_eq!(req["goal"].as_array().unwrap().len(), 6);
                let line = if misbehave && i % 3 == 0 {
                    // garbage instead of an answer; the runner asks again
                    match i % 4 {
                        0 => "not json".to_string(),
                        1 => common::answer(req, "action", json!({"action": [2.0, 0, 0, 0, 0, 0]})),
                        2 => common::answer(req, "action", json!({"action": [0.0]})),
                        _ => common::answer(req, "pong", json!({})),
                    }
                } else {
                    common::answer(req, "action", json!({"action": common::goal_seeking(req, 0.4)}))
                };
                Some(common::Reply::Line(line))
            })
        });
        let summary = run_with(&x, |a| tx.send(a).unwrap()).unwrap();
        assert_eq!(summary.episodes, 4);
        let log = client.join().unwrap();
        let resets: Vec<u64> = log
            .requests
            .iter()
            .filter(|r| r["type"] == "reset_notice")
            .map(|r| r["seed"].as_u64().unwrap())
            .collect();
        assert_eq!(resets, (0..4).map(|i| episode_seed(3, i)).collect::<Vec<_>>());
        assert_eq!(
            without_timing(&dir.path().join("metrics.csv")),
            without_timing(&builtin.path().join("metrics.csv")),
            "misbehave = {misbehave}"
        );
        let strip = |d: &Path| -> Vec<Value> {
            events(d)
                .into_iter()
                .filter(|v| v["event"] == "episode")
                .collect()
        };
        assert_eq!(strip(dir.path()), strip(builtin.path()));
    }
}

#[test]
fn external_agent_receives_update_batches() {
    let cfg_dir = tempfile::tempdir().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("one_dof_reach", Mode::Train, dir.path());
    s.train_config = Some(write_train_config(cfg_dir.path()));
    s.agent = AgentKind::External;
    s.endpoint = "127.0.0.1:0".into();
    let (tx, rx) = std::sync::mpsc::channel();
    let client = std::thread::spawn(move || {
        let addr = rx.recv().unwrap();
        common::Agent::connect(addr).serve(|_, _| None)
    });
    let summary = run_with(&s, |a| tx.send(a).unwrap()).unwrap();
    let log = client.join().unwrap();
    let ckpt: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("checkpoint.json")).unwrap(),
    )
    .unwrap();
    let updates: Vec<&Value> = log.requests.iter().filter(|r| r["type"] == "update").collect();
    assert_eq!(updates.len() as u64, ckpt["update_calls"].as_u64().unwrap());
    assert!(!updates.is_empty());
    for u in updates {
        let batch = u["batch"].as_array().unwrap();
        assert_eq!(batch.len(), 8);
        for t in batch {
            assert_eq!(t["obs"].as_array().unwrap().len(), 2 + 12);
            assert_eq!(t["next_obs"].as_array().unwrap().len(), 2 + 12);
            assert_eq!(t["goal"].as_array().unwrap().len(), 1);
            let r = t["reward"].as_f64().unwrap();
            assert!(r == 0.0 || r == -1.0);
        }
    }
    let saves: Vec<&Value> = log.requests.iter().filter(|r| r["type"] == "save").collect();
    assert_eq!(saves.len(), 3);
    assert!(saves[0]["path"].as_str().unwrap().ends_with("agent_checkpoint"));
    let acts = log.kinds.iter().filter(|k| *k == "act").count();
    assert_eq!(acts, ckpt["t_total"].as_u64().unwrap() as usize - 30);
    assert_eq!(summary.metrics.len(), 3);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safearm"))
}

#[test]
fn binary_runs_and_reports_failures() {
    let help = bin().arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in [
        "--scenario",
        "--mode",
        "--agent",
        "--seed",
        "--epochs",
        "--episodes-per-epoch",
        "--out",
        "--shield",
        "--endpoint",
    ] {
        assert!(text.contains(flag), "{flag}");
    }

    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["--mode", "evaluate", "--agent", "scripted", "--shield", "on"])
        .args(["--episodes-per-epoch", "2", "--max-steps", "5", "--seed", "1"])
        .arg("--scenario")
        .arg(assets_dir().join("scenarios/one_dof_reach.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    for f in ["manifest.json", "metrics.csv", "events.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let bad = bin()
        .args(["--mode", "evaluate", "--scenario", "/nonexistent.toml", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("does not exist"));

    let unknown = bin()
        .args(["--mode", "dance", "--scenario", "x", "--out", "y"])
        .output()
        .unwrap();
    assert!(!unknown.status.success());
}
