use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faasfl_core::controller::SessionConfig;
use faasfl_core::cost::CostModel;
use faasfl_core::fabric::FabricConfig;
use serde_json::Value;

fn faasfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faasfl"))
        .args(args)
        .output()
        .expect("spawn faasfl")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim_end()).expect("stderr is one JSON line")
}

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SESSION: &str = r#"
session_id = "cli"
clients_per_round = 3
total_clients = 10
max_rounds = 4
target_accuracy = 1.0
client_timeout_s = 60.0

[model]
kind = "logistic_regression"
layer_sizes = [8, 4]
activation = "softmax_output"
loss = "categorical_cross_entropy"

[evaluation]
mode = "central"
shard_id = "central-test"

[hyperparams]
local_epochs = 2
batch_size = 10

[hyperparams.optimizer]
kind = "adam"
learning_rate = 0.01
"#;

fn partition(dir: &Path, seed: &str) -> Value {
    ok_json(&faasfl(&[
        "partition",
        "--dataset",
        "synthetic:features=8,classes=4,train=1000,test=200",
        "--strategy",
        "sorted",
        "--shards",
        "10",
        "--out",
        s(dir),
        "--seed",
        seed,
    ]))
}

#[test]
fn sample_configs_parse() {
    SessionConfig::load(&sample("session.toml")).unwrap();
    FabricConfig::load(&sample("fabric.toml")).unwrap();
    CostModel::load(&sample("prices.toml")).unwrap();
}

#[test]
fn partition_writes_shards_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = partition(&a, "3");
    assert_eq!(summary["shards"], 10);
    assert_eq!(summary["examples"], 900);
    assert_eq!(summary["central_test"], "central-test");
    partition(&b, "3");
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    assert_eq!(fs::read_dir(&a).unwrap().count(), 22);

    let user = tmp.path().join("u");
    let out = ok_json(&faasfl(&[
        "partition",
        "--dataset",
        "synthetic:features=8,classes=4,train=1000",
        "--strategy",
        "user",
        "--shards",
        "5",
        "--user-mean",
        "40",
        "--test-fraction",
        "0",
        "--out",
        s(&user),
    ]));
    assert_eq!(out["shards"], 5);
    assert!(out["central_test"].is_null());
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    partition(&p("shards"), "0");
    fs::write(p("session.toml"), SESSION).unwrap();
    let run = |metrics: &str, trace: &str, store: &str| {
        ok_json(&faasfl(&[
            "run",
            "--config",
            s(&p("session.toml")),
            "--fabric",
            s(&sample("fabric.toml")),
            "--metrics",
            s(&p(metrics)),
            "--shards",
            s(&p("shards")),
            "--trace",
            s(&p(trace)),
            "--store",
            s(&p(store)),
        ]))
    };
    let summary = run("m.csv", "t.csv", "store");
    assert_eq!(summary["rounds"], 4);
    assert_eq!(summary["version"], 4);
    // 3 clients plus the aggregator per round
    assert_eq!(summary["invocations"], 16);
    let metrics = fs::read_to_string(p("m.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    // same seed, same virtual timings and metrics
    run("m2.csv", "t2.csv", "store2");
    assert_eq!(metrics, fs::read_to_string(p("m2.csv")).unwrap());

    let central = ok_json(&faasfl(&[
        "evaluate", "--session", "cli", "--mode", "central", "--store", s(&p("store")), "--shards", s(&p("shards")),
    ]));
    assert_eq!(central["version"], 4);
    assert_eq!(central["accuracy"], summary["accuracy"]);
    assert_eq!(central["examples"], 200);

    let fed = ok_json(&faasfl(&[
        "evaluate", "--session", "cli", "--mode", "federated", "--store", s(&p("store")), "--shards", s(&p("shards")),
        "--clients", "4", "--seed", "9",
    ]));
    assert_eq!(fed["clients"], 4);
    assert_eq!(fed["examples"], 40);

    fs::write(
        p("prices.toml"),
        fs::read_to_string(sample("prices.toml")).unwrap().replace("instances = 20", "instances = 10"),
    )
    .unwrap();
    let cost = ok_json(&faasfl(&[
        "estimate-cost", "--trace", s(&p("t.csv")), "--prices", s(&p("prices.toml")), "--wall-time-from", s(&p("m.csv")),
        "--out", s(&p("cost.csv")), "--targets", "0.0,1.01",
    ]));
    assert_eq!(cost["invocations"], 12);
    assert!(cost["faas_cost"].as_f64().unwrap() < cost["iaas_cost"].as_f64().unwrap());
    let rows = fs::read_to_string(p("cost.csv")).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("round,target_accuracy,faas_cost,iaas_cost,multiplier"));
    // target 0 is reached in round 1; 1.01 never
    assert_eq!(lines.count(), 4);
}

#[test]
fn errors_are_single_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    let e = err_json(
        &faasfl(&["run", "--config", s(&missing), "--metrics", "m.csv", "--shards", s(tmp.path())]),
        1,
    );
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("missing.toml"));

    let e = err_json(&faasfl(&["partition", "--bogus"]), 2);
    assert_eq!(e["error"], "usage");

    let e = err_json(
        &faasfl(&[
            "partition", "--dataset", "synthetic:features=2,classes=2,train=4", "--strategy", "iid", "--shards", "9",
            "--out", s(tmp.path()),
        ]),
        1,
    );
    assert_eq!(e["error"], "data");

    let bad = tmp.path().join("prices.toml");
    fs::write(&bad, fs::read_to_string(sample("prices.toml")).unwrap().replace("0.12", "-0.12")).unwrap();
    let e = err_json(
        &faasfl(&[
            "estimate-cost", "--trace", "t", "--prices", s(&bad), "--wall-time-from", "m", "--out", "o",
        ]),
        1,
    );
    assert_eq!(e["error"], "prices");
}

#[test]
fn help_documents_every_flag() {
    for (cmd, flags) in [
        ("partition", &["--dataset", "--strategy", "--shards", "--out", "--seed", "--test-fraction"][..]),
        ("run", &["--config", "--fabric", "--metrics", "--shards", "--trace", "--store", "--seed"][..]),
        ("evaluate", &["--session", "--mode", "--store", "--shards", "--clients", "--seed"][..]),
        ("estimate-cost", &["--trace", "--prices", "--wall-time-from", "--out", "--targets", "--multipliers"][..]),
    ] {
        let out = faasfl(&[cmd, "--help"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
