#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};

use brainspeech::cli::load_synth_spec;
use brainspeech::config::RunConfig;
use brainspeech::dataset::synth::generate_synthetic;
use brainspeech::dataset::Dataset;
use brainspeech::evaluation::{evaluate, EvalOutputs};
use brainspeech::training::{train, TrainSummary};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The desk-scale run configuration plus `key=value` overrides.
pub fn desk_config(overrides: &[&str]) -> RunConfig {
    let text = std::fs::read_to_string(repo_root().join("configs/desk.toml")).unwrap();
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml(&text, &overrides).unwrap()
}

/// Generates a synthetic dataset under `dir` from spec overrides.
pub fn synth(dir: &Path, overrides: &[&str]) -> PathBuf {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let spec = load_synth_spec("", &overrides).unwrap();
    generate_synthetic(&spec, dir).unwrap();
    dir.to_path_buf()
}

pub struct Run {
    pub summary: TrainSummary,
    pub eval: EvalOutputs,
}

impl Run {
    pub fn top(&self, k: usize) -> f64 {
        self.eval.json.segment.iter().find(|t| t.k == k).expect("k evaluated").accuracy
    }
}

pub fn train_eval(dataset: &Path, cfg: &RunConfig, out: &Path) -> Run {
    let ds = Dataset::load(dataset).unwrap();
    let summary = train(&ds, cfg, out).unwrap();
    let eval = evaluate(&summary.checkpoint, dataset, &out.join("eval")).unwrap();
    Run { summary, eval }
}

/// Writes a line to the real stderr, bypassing the test harness capture.
pub fn report(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

/// Half-width of a 3σ binomial band around `p` (fractions, not percent).
pub fn three_sigma(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
