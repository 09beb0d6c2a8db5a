mod common;

use std::path::Path;
use std::process::{Command, Output};

fn brainspeech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainspeech")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = brainspeech(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn truncated_recording_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", &s(&data), "--set", "segments=8", "--set", "audio=false"]);
    let bin = data.join("recordings/1_0.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 6]).unwrap();

    let out = brainspeech(&["ingest", "--dataset", &s(&data), "--out", &s(&dir.path().join("ing"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1_0.bin"), "{err}");
    assert!(err.starts_with("error[format]"), "{err}");
}

#[test]
fn ingest_accepts_a_synthetic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", &s(&data), "--set", "segments=10"]);
    let out = dir.path().join("ing");
    ok(&["ingest", "--dataset", &s(&data), "--out", &s(&out)]);
    assert!(out.join("ingest.json").exists());
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "ingest");
    assert_eq!(run["status"], "ok");
}

#[test]
fn usage_errors_exit_with_two() {
    let out = brainspeech(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
    let out = brainspeech(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    let res = brainspeech(&["train", "--out", &s(&out), "--dataset", "nowhere", "--set", "model.d1=-3"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.starts_with("error[config]") && err.contains("model.d1"), "{err}");
    // the failure is still recorded
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["status"], "error[config]");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", &s(d), "--set", "segments=12", "--set", "noise_std=0.5", "--set", "seed=4"]);
    }
    let mut files = Vec::new();
    collect(&a, &mut files);
    assert!(files.len() > 10);
    for f in files {
        let rel = f.strip_prefix(&a).unwrap();
        if rel == Path::new("run.json") {
            continue;
        }
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
    // a different seed changes the data
    let c = dir.path().join("c");
    ok(&["synth", "--out", &s(&c), "--set", "segments=12", "--set", "noise_std=0.5", "--set", "seed=5"]);
    assert_ne!(std::fs::read(a.join("recordings/0_0.bin")).unwrap(), std::fs::read(c.join("recordings/0_0.bin")).unwrap());
}

fn collect(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| s(&dir.path().join(x));
    let desk = s(&common::repo_root().join("configs/desk.toml"));
    ok(&["synth", "--out", &p("data"), "--set", "segments=40", "--set", "noise_std=1"]);
    ok(&["train", "--config", &desk, "--dataset", &p("data"), "--out", &p("run"), "--set", "training.max_epochs=2", "--set", "eval.recon=true"]);
    for f in ["history.csv", "config.toml", "summary.json", "run.json", "best/manifest.json", "best/params.bin", "best/adam.bin", "best/norms.bin"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,valid_loss,valid_top10"));
    assert_eq!(history.lines().count(), 3);

    ok(&["eval", "--checkpoint", &p("run/best"), "--dataset", &p("data"), "--out", &p("eval")]);
    for f in ["report.json", "probs.bin", "probs.json", "words.csv", "trials.csv", "recon/0.bin", "recon/0.json"] {
        assert!(dir.path().join("eval").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let trials = report["trials"].as_u64().unwrap() as usize;
    assert_eq!(report["candidates"], 4);
    assert_eq!(report["restricted"]["n"], 4);

    // one random feature column per trial for the ridge analysis
    let mut table = String::from("f1,f2\n");
    for i in 0..trials {
        table.push_str(&format!("{},{}\n", i % 3, (i * 7 % 5) as f64 / 5.0));
    }
    std::fs::write(dir.path().join("feats.csv"), table).unwrap();
    ok(&[
        "analyze",
        "--trials",
        &p("eval/trials.csv"),
        "--features",
        &format!("toy={}", p("feats.csv")),
        "--folds",
        "2",
        "--compare-models",
        &p("eval/report.json"),
        &p("eval/report.json"),
        "--out",
        &p("analysis"),
    ]);
    let analysis: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("analysis/analysis.json")).unwrap()).unwrap();
    assert!(analysis["prediction"]["toy"]["overall"]["r"].is_number());
    assert_eq!(analysis["wilcoxon_top10"]["degenerate"], true);

    ok(&["attention-dump", "--checkpoint", &p("run/best"), "--dataset", &p("data"), "--out", &p("att")]);
    let csv = std::fs::read_to_string(dir.path().join("att/attention/0_0.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("output,sensor,name,x,y,weight"));
    // 32 outputs × 32 sensors
    assert_eq!(csv.lines().count(), 1 + 32 * 32);
}
