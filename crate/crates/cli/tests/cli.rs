use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn trb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trb"))
        .args(args)
        .output()
        .expect("spawn trb")
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = trb(&["synth", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = tree(&a);
    assert!(ta.contains_key(Path::new("train.json")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn explain_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = trb(&[
        "explain",
        "--model",
        &format!("{d}/missing"),
        "--clip",
        d,
        "--out",
        &format!("{d}/out"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint not found"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(trb(&["explain", "--out", "x"]).status.code(), Some(2));
    assert_eq!(
        trb(&["synth", "--out", "x", "--seed", "many"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_config_is_a_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\"synth\": {\"num_classes\": 3}}").unwrap();
    let o = trb(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

/// Every stage on default settings, with training and mask search cut short.
#[test]
fn pipeline_smoke_run_emits_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let run = |args: &[&str]| {
        let o = trb(args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    run(&["synth", "--out", &p("data")]);
    run(&[
        "train",
        "--data",
        &p("data"),
        "--epochs",
        "1",
        "--out",
        &p("run"),
    ]);
    run(&[
        "eval",
        "--model",
        &p("run/checkpoint"),
        "--data",
        &p("data"),
        "--out",
        &p("eval"),
    ]);
    let clip = p("data/test/clip_0000");
    run(&[
        "explain",
        "--model",
        &p("run/checkpoint"),
        "--clip",
        &clip,
        "--iters",
        "2",
        "--out",
        &p("explain"),
    ]);
    run(&[
        "score",
        "--saliency",
        &p("explain/saliency.trbt"),
        "--clip",
        &clip,
        "--out",
        &p("score"),
    ]);

    for f in [
        "data/train.json",
        "data/val.json",
        "data/test.json",
        "data/synth_report.json",
        "run/history.jsonl",
        "run/train_report.json",
        "eval/eval.json",
        "explain/mask.trbt",
        "explain/saliency.trbt",
        "explain/trace.jsonl",
        "explain/explanation.json",
        "explain/overlay/overlay_000.png",
        "explain/overlay/overlay_019.png",
        "score/scores.jsonl",
        "score/object_scores.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert!(
        fs::read_dir(dir.path().join("run/checkpoint"))
            .unwrap()
            .count()
            > 0
    );
    let trace = fs::read_to_string(dir.path().join("explain/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
}
