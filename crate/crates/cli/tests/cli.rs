//! End-to-end tests of the `dal` binary: exit codes, artifact layout,
//! determinism and the synth → train → generate → evaluate → bench
//! pipeline.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn dal_ok(args: &[&str]) -> Output {
    let out = dal(args);
    assert!(
        out.status.success(),
        "dal {:?} failed with {:?}\nstdout: {}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn synth(dir: &Path, name: &str, seed: &str) -> String {
    let out = dir.join(name);
    dal_ok(&[
        "synth-data",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        seed,
        "--n-safe",
        "1",
        "--m",
        "2",
        "--n-diverse",
        "4",
        "--alphabet",
        "12",
        "--min-len",
        "2",
        "--max-len",
        "3",
    ]);
    out.to_str().unwrap().to_string()
}

#[test]
fn synth_data_is_deterministic_and_writes_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.tsv", "7");
    let b = synth(dir.path(), "b.tsv", "7");
    let c = synth(dir.path(), "c.tsv", "8");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let cfg = fs::read_to_string(format!("{a}.run-config.txt")).unwrap();
    assert!(cfg.contains("command = synth-data"));
    assert!(cfg.contains("seed = 7"));
    assert!(cfg.contains("alphabet = 12"));
}

#[test]
fn config_file_feeds_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("synth.cfg");
    fs::write(
        &cfg_path,
        "seed = 9\nn-safe = 1\nm = 2\nn-diverse = 4\nalphabet = 12\nmin-len = 2\nmax-len = 3\n",
    )
    .unwrap();
    let out = dir.path().join("from-config.tsv");
    dal_ok(&[
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let resolved = fs::read_to_string(dir.path().join("from-config.tsv.run-config.txt")).unwrap();
    assert!(resolved.contains("seed = 9"));

    let out2 = dir.path().join("flag-wins.tsv");
    dal_ok(&[
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    let resolved = fs::read_to_string(dir.path().join("flag-wins.tsv.run-config.txt")).unwrap();
    assert!(resolved.contains("seed = 11"));
}

#[test]
fn usage_problems_exit_1() {
    let dir = tempfile::tempdir().unwrap();

    assert_eq!(dal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dal(&["synth-data", "--bogus-flag", "1"]).status.code(), Some(1));
    // Missing required output path.
    assert_eq!(dal(&["synth-data", "--seed", "1"]).status.code(), Some(1));

    let bad_cfg = dir.path().join("bad.cfg");
    fs::write(&bad_cfg, "this is not a key value line\n").unwrap();
    let out = dir.path().join("x.tsv");
    let res = dal(&[
        "synth-data",
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));

    let unknown_key = dir.path().join("unknown.cfg");
    fs::write(&unknown_key, "no-such-knob = 3\n").unwrap();
    let res = dal(&[
        "synth-data",
        "--config",
        unknown_key.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("no-such-knob"));

    // Invalid hyperparameter values are usage errors too.
    let corpus = synth(dir.path(), "c.tsv", "1");
    let res = dal(&[
        "train",
        "--corpus",
        &corpus,
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--baseline-decay",
        "1.5",
    ]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = dal(&[
        "train",
        "--corpus",
        dir.path().join("missing.tsv").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let res = dal(&[
        "generate",
        "--checkpoint",
        dir.path().join("missing.ckpt").to_str().unwrap(),
        "--queries",
        dir.path().join("q.txt").to_str().unwrap(),
        "--out",
        dir.path().join("r.txt").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    assert_eq!(dal(&["--help"]).status.code(), Some(0));
    assert_eq!(dal(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_trains_generates_evaluates_and_benches() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), "corpus.tsv", "7");
    let corpus_bytes = fs::read(&corpus).unwrap();

    // Train a tiny model.
    let run = dir.path().join("run");
    dal_ok(&[
        "train",
        "--corpus",
        &corpus,
        "--out",
        run.to_str().unwrap(),
        "--mode",
        "dual-adv",
        "--embed-dim",
        "3",
        "--hidden-dim",
        "4",
        "--pretrain-epochs-gen",
        "1",
        "--pretrain-epochs-disc",
        "1",
        "--dal-epochs",
        "2",
        "--batch-size",
        "3",
        "--max-len",
        "5",
        "--seed",
        "3",
    ]);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("run-config.txt").exists());
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train-log.json")).unwrap()).unwrap();
    assert!(!log["records"].as_array().unwrap().is_empty());
    // Inputs are never mutated.
    assert_eq!(fs::read(&corpus).unwrap(), corpus_bytes);

    // Queries: first three corpus queries.
    let q_path = dir.path().join("q.txt");
    let queries: Vec<String> = fs::read_to_string(&corpus)
        .unwrap()
        .lines()
        .take(3)
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    assert_eq!(queries.len(), 3);
    fs::write(&q_path, queries.join("\n") + "\n").unwrap();

    // Generate with two decoders.
    for decoder in ["greedy", "mmi-bidi"] {
        let out = dir.path().join(format!("resp-{decoder}.txt"));
        dal_ok(&[
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--queries",
            q_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--decoder",
            decoder,
            "--bidi-nbest",
            "3",
        ]);
        let text = fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 3, "{decoder}");
        assert!(dir
            .path()
            .join(format!("resp-{decoder}.txt.run-config.txt"))
            .exists());
    }

    // Evaluate, reusing the checkpoint as its own baseline row.
    let report_dir = dir.path().join("report");
    dal_ok(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--baseline-checkpoint",
        ckpt.to_str().unwrap(),
        "--queries",
        q_path.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
        "--repetitions",
        "1",
        "--bidi-nbest",
        "3",
    ]);
    let report = fs::read_to_string(report_dir.join("report.txt")).unwrap();
    for key in [
        "system.baseline-greedy.distinct1",
        "system.greedy.distinct1",
        "system.mmi-anti.distinct2",
        "system.mmi-bidi.latency_ms",
    ] {
        assert!(report.contains(key), "report lacks {key}:\n{report}");
    }
    let d1: f64 = report
        .lines()
        .find(|l| l.starts_with("system.greedy.distinct1 = "))
        .unwrap()
        .rsplit(" = ")
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&d1));
    let responses = fs::read_to_string(report_dir.join("responses-greedy.txt")).unwrap();
    assert_eq!(responses.lines().count(), 3);
    assert!(report_dir.join("run-config.txt").exists());

    // Bench prints all five strategies and writes when asked.
    let bench_dir = dir.path().join("bench");
    let out = dal_ok(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--queries",
        q_path.to_str().unwrap(),
        "--out",
        bench_dir.to_str().unwrap(),
        "--repetitions",
        "1",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "latency-ms.greedy",
        "latency-ms.mmi-anti",
        "latency-ms.mmi-bidi-5",
        "latency-ms.mmi-bidi-10",
        "latency-ms.mmi-bidi-20",
    ] {
        assert!(stdout.contains(name), "bench output lacks {name}");
    }
    assert!(bench_dir.join("bench.txt").exists());
}
