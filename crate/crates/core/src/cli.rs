//! Command-line front end. `run` returns the process exit code.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::config::RunConfig;
use crate::dataset::synth::{generate_synthetic, SynthSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::ridge::{prediction_analysis, DEFAULT_ALPHA, DEFAULT_FOLDS};
use crate::evaluation::stats::{mann_whitney_u, wilcoxon_signed_rank};
use crate::evaluation::evaluate;
use crate::model::load_checkpoint;
use crate::speech_features::SpeechRep;
use crate::training::train;

#[derive(Parser, Debug)]
#[command(name = "brainspeech", version, about = "Decode perceived speech from M/EEG with contrastive learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a dataset in the interchange format.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset from a TOML spec.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides of spec fields.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model; writes `history.csv` and `best/` under `--out`.
    Train(TrainArgs),
    /// Score the test split with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ridge prediction analysis and model/dataset comparisons.
    Analyze(AnalyzeArgs),
    /// Write spatial-attention maps of a checkpoint for each recording layout.
    AttentionDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `dataset.path`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = ["mel", "deep-mel", "external"])]
    pub speech_rep: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_mels: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `section.key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// `trials.csv` written by `eval`.
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// `name=path` of a feature table, one CSV row per trial.
    #[arg(long = "features", value_name = "NAME=PATH")]
    pub features: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    /// Two `report.json` files scored on the same subjects (Wilcoxon).
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare_models: Option<Vec<PathBuf>>,
    /// Two `report.json` files from different datasets (Mann-Whitney).
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare_datasets: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'static str,
    git: Option<String>,
    config: Option<serde_json::Value>,
    seeds: BTreeMap<&'static str, u64>,
    status: String,
    wall_time_s: f64,
}

fn git_stamp() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code. Failures print one `error[<category>]: …` line.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("error[usage]: {first}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            1
        }
    }
}

type Outcome = (Option<serde_json::Value>, BTreeMap<&'static str, u64>);

/// Runs the command, then records `run.json` under its output directory
/// whether or not the command succeeded.
fn dispatch(cmd: Command, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let (name, out) = match &cmd {
        Command::Ingest { out, .. } => ("ingest", out.clone()),
        Command::Synth { out, .. } => ("synth", out.clone()),
        Command::Train(a) => ("train", a.out.clone()),
        Command::Eval { out, .. } => ("eval", out.clone()),
        Command::Analyze(a) => ("analyze", a.out.clone()),
        Command::AttentionDump { out, .. } => ("attention-dump", out.clone()),
    };
    let result = execute(cmd);
    let (config, seeds) = match &result {
        Ok((c, s)) => (c.clone(), s.clone()),
        Err(_) => (None, BTreeMap::new()),
    };
    let record = RunRecord {
        command: name,
        argv,
        version: env!("CARGO_PKG_VERSION"),
        git: git_stamp(),
        config,
        seeds,
        status: match &result {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("error[{}]", e.category()),
        },
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    if out.is_dir() || result.is_ok() {
        binio::write_json(&out.join("run.json"), &record)?;
    }
    result.map(|_| ())
}

fn execute(cmd: Command) -> Result<Outcome> {
    Ok(match cmd {
        Command::Ingest { dataset, out } => {
            let ds = Dataset::load(&dataset)?;
            let summary = ds.validate()?;
            println!("{}", serde_json::to_string(&summary)?);
            binio::write_json(&out.join("ingest.json"), &summary)?;
            (None, BTreeMap::new())
        }
        Command::Synth { spec, out, set } => {
            let text = match &spec {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => String::new(),
            };
            let spec = load_synth_spec(&text, &set)?;
            let summary = generate_synthetic(&spec, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
            let seeds = BTreeMap::from([("synth", spec.seed)]);
            (Some(serde_json::to_value(&spec)?), seeds)
        }
        Command::Train(a) => {
            let cfg = train_config(&a)?;
            let path = cfg
                .dataset
                .path
                .clone()
                .ok_or_else(|| Error::Config {
                    key: "dataset.path".into(),
                    reason: "no dataset given (use --dataset or set dataset.path)".into(),
                })?;
            let ds = Dataset::load(&path)?;
            binio::write_atomic(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
            let summary = train(&ds, &cfg, &a.out)?;
            binio::write_json(&a.out.join("summary.json"), &summary)?;
            info!("best epoch {} (valid loss {:.4})", summary.best_epoch, summary.best_valid_loss);
            let seeds = BTreeMap::from([("training", cfg.training.seed), ("split", cfg.dataset.split_seed)]);
            (Some(serde_json::to_value(&cfg)?), seeds)
        }
        Command::Eval { checkpoint, dataset, out } => {
            let res = evaluate(&checkpoint, &dataset, &out)?;
            let cfg = load_checkpoint(&checkpoint)?.manifest.config;
            let top10 = res.json.segment.iter().find(|t| t.k == 10).map(|t| t.accuracy);
            if let Some(t) = top10 {
                info!("segment top-10 {t:.2}% over {} candidates", res.json.candidates);
            }
            let seeds = BTreeMap::from([("training", cfg.training.seed), ("restricted", cfg.eval.restricted_seed)]);
            (Some(serde_json::to_value(&cfg)?), seeds)
        }
        Command::Analyze(a) => {
            analyze(&a)?;
            (None, BTreeMap::new())
        }
        Command::AttentionDump { checkpoint, dataset, out } => {
            attention_dump(&checkpoint, &dataset, &out)?;
            (None, BTreeMap::new())
        }
    })
}

pub fn load_synth_spec(text: &str, overrides: &[String]) -> Result<SynthSpec> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
        key: "<spec>".into(),
        reason: e.message().to_string(),
    })?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.clone(),
            reason: "override must look like key=value".into(),
        })?;
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.trim().to_string(), value);
    }
    let spec: SynthSpec = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config {
        key: e.path().to_string(),
        reason: crate::config::strip_key_suffix(&e.inner().to_string()),
    })?;
    spec.validate()?;
    Ok(spec)
}

/// File, then `--set`, then the dedicated flags.
pub fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let text = match &a.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut overrides = a.set.clone();
    if let Some(d) = &a.dataset {
        overrides.push(format!("dataset.path={}", toml::Value::String(d.display().to_string())));
    }
    if let Some(r) = &a.speech_rep {
        r.parse::<SpeechRep>()?;
        overrides.push(format!("speech.rep=\"{r}\""));
    }
    if let Some(n) = a.n_mels {
        overrides.push(format!("speech.n_mels={n}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("training.seed={s}"));
    }
    let mut cfg = RunConfig::from_toml(&text, &overrides)?;
    // relative dataset paths in a config file are relative to that file
    if let (Some(p), Some(file)) = (&cfg.dataset.path, &a.config) {
        if p.is_relative() && a.dataset.is_none() {
            if let Some(dir) = file.parent() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
    }
    Ok(cfg)
}

#[derive(Deserialize)]
struct TrialRow {
    subject: usize,
    word_p_true: f64,
}

#[derive(Deserialize)]
struct ReportSubjects {
    per_subject: Vec<SubjectRow>,
}

#[derive(Deserialize)]
struct SubjectRow {
    subject: usize,
    top10: f64,
}

fn read_feature_table(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let d = rdr.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            values.push(field.trim().parse::<f64>().map_err(|_| {
                Error::format(path, format!("row {}: `{field}` is not a number", i + 1))
            })?);
        }
        n += 1;
    }
    Ok((values, n, d))
}

fn report_subjects(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let r: ReportSubjects = binio::read_json(path)?;
    Ok(r.per_subject.into_iter().map(|s| (s.subject, s.top10)).collect())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut out = serde_json::Map::new();
    if !a.features.is_empty() {
        let trials_path = a.trials.as_ref().ok_or_else(|| Error::invalid("trials", "feature analysis needs --trials"))?;
        let rows: Vec<TrialRow> = csv::Reader::from_path(trials_path)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        let y: Vec<f64> = rows.iter().map(|r| r.word_p_true).collect();
        let subjects: Vec<usize> = rows.iter().map(|r| r.subject).collect();
        let mut tables = serde_json::Map::new();
        for spec in &a.features {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::invalid("features", format!("`{spec}` is not NAME=PATH")))?;
            let (x, n, d) = read_feature_table(Path::new(path))?;
            if n != y.len() {
                return Err(Error::format(path, format!("{n} rows for {} trials", y.len())));
            }
            let res = prediction_analysis(&x, n, d, &y, Some(&subjects), a.alpha, a.folds)?;
            tables.insert(name.to_string(), serde_json::to_value(res)?);
        }
        out.insert("prediction".into(), tables.into());
    }
    if let Some(pair) = &a.compare_models {
        let (ra, rb) = (report_subjects(&pair[0])?, report_subjects(&pair[1])?);
        let common: Vec<usize> = ra.keys().filter(|s| rb.contains_key(s)).copied().collect();
        if common.is_empty() {
            return Err(Error::invalid("compare_models", "the reports share no subjects"));
        }
        let xa: Vec<f64> = common.iter().map(|s| ra[s]).collect();
        let xb: Vec<f64> = common.iter().map(|s| rb[s]).collect();
        out.insert("wilcoxon_top10".into(), serde_json::to_value(wilcoxon_signed_rank(&xa, &xb)?)?);
    }
    if let Some(pair) = &a.compare_datasets {
        let xa: Vec<f64> = report_subjects(&pair[0])?.into_values().collect();
        let xb: Vec<f64> = report_subjects(&pair[1])?.into_values().collect();
        out.insert("mann_whitney_top10".into(), serde_json::to_value(mann_whitney_u(&xa, &xb)?)?);
    }
    if out.is_empty() {
        return Err(Error::invalid("analyze", "nothing to do: pass --features, --compare-models or --compare-datasets"));
    }
    binio::write_json(&a.out.join("analysis.json"), &out)
}

fn attention_dump(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(dataset)?;
    for rec in &ds.recordings {
        let layout = rec.layout()?;
        let w = ck.model.brain.attention_weights(&layout)?;
        let (d, c) = (w.shape()[0], w.shape()[1]);
        let mut s = String::from("output,sensor,name,x,y,weight\n");
        for j in 0..d {
            for (i, ch) in rec.channels.iter().enumerate() {
                writeln!(s, "{j},{i},{},{},{},{}", ch.name, ch.x, ch.y, w.data()[j * c + i]).unwrap();
            }
        }
        binio::write_atomic(&out.join("attention").join(format!("{}.csv", rec.stem())), s.as_bytes())?;
    }
    Ok(())
}
