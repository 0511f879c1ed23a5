//! Drives the `tzsh` binary end to end: synth -> train -> encode -> eval,
//! plus the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn tzsh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tzsh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bench.spec");
    std::fs::write(
        &spec,
        "n_seen=4\nn_novel=2\nd_in=8\nword_dim=8\nsource_n=256\nunlabeled_n=512\nquery_n=40\ndb_n=120\nseed=5\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = tzsh(&["synth", "--spec", path_str(&spec), "--out", path_str(&data)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in [
        "source.feat",
        "unlabeled.feat",
        "queries.feat",
        "db.feat",
        "vocab.txt",
    ] {
        assert!(data.join(file).is_file(), "missing {file}");
    }
    assert!(data.join("truth/unlabeled.labels").is_file());

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "epochs=2\nl=16\nn_y=2\nseed=5\n").unwrap();
    let run = dir.path().join("run");
    let out = tzsh(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&data),
        "--out",
        path_str(&run),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("checkpoint.tzsh").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["map"].as_f64().unwrap() >= 0.0);
        assert!(v.get("wall_time_s").is_none());
    }

    // resume two more epochs on top
    std::fs::write(&cfg, "epochs=4\nl=16\nn_y=2\nseed=5\n").unwrap();
    let out = tzsh(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&data),
        "--out",
        path_str(&run),
        "--resume",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = run.join("checkpoint.tzsh");
    let q_codes = dir.path().join("queries.codes");
    let db_codes = dir.path().join("db.codes");
    for (features, codes) in [("queries.feat", &q_codes), ("db.feat", &db_codes)] {
        let out = tzsh(&[
            "encode",
            "--checkpoint",
            path_str(&ckpt),
            "--features",
            path_str(&data.join(features)),
            "--out",
            path_str(codes),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let first_code_line = std::fs::read_to_string(&q_codes).unwrap();
    let bits = first_code_line
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap();
    assert_eq!(bits.len(), 16);

    let report = dir.path().join("metrics.eval.jsonl");
    let out = tzsh(&[
        "eval",
        "--queries",
        path_str(&q_codes),
        "--db",
        path_str(&db_codes),
        "--radius",
        "2",
        "--out",
        path_str(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["metric"], "map");
    assert_eq!(lines[0]["bits"], 16);
    let map = lines[0]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(lines[1]["metric"], "precision_at_2");
}

#[test]
fn usage_errors_exit_with_one() {
    let out = tzsh(&["bogus-subcommand"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tzsh(&["train", "--config", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "epochs=1\n").unwrap();
    let out = tzsh(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&dir.path().join("nope")),
        "--out",
        path_str(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("source.feat"), "{stderr}");

    // bad config key
    std::fs::write(&cfg, "bogus_key=1\n").unwrap();
    let out = tzsh(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(dir.path()),
        "--out",
        path_str(&dir.path().join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_requires_labeled_codes() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.codes");
    let db = dir.path().join("db.codes");
    std::fs::write(&q, "? 1010\n").unwrap();
    std::fs::write(&db, "1 1010\n").unwrap();
    let out = tzsh(&[
        "eval",
        "--queries",
        path_str(&q),
        "--db",
        path_str(&db),
        "--out",
        path_str(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
