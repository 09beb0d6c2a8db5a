//! Run configuration: one TOML schema covering dataset, preprocessing,
//! speech representation, model, training and evaluation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::brain::BrainNetConfig;
use crate::dataset::WindowConfig;
use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::optim::AdamConfig;
use crate::speech_features::SpeechRep;

/// Clamp limit in scaled units; `none` disables clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampLimit(pub Option<f64>);

impl Default for ClampLimit {
    fn default() -> Self {
        ClampLimit(Some(20.0))
    }
}

impl Serialize for ClampLimit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for ClampLimit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = ClampLimit;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or \"none\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<ClampLimit, E> {
                if v > 0.0 && v.is_finite() {
                    Ok(ClampLimit(Some(v)))
                } else {
                    Err(E::custom("clamp limit must be positive"))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<ClampLimit, E> {
                self.visit_f64(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<ClampLimit, E> {
                self.visit_f64(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<ClampLimit, E> {
                if v == "none" {
                    Ok(ClampLimit(None))
                } else {
                    Err(E::custom(format!("`{v}` is not a number or \"none\"")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub window: WindowConfig,
    /// Used only when the dataset ships without `splits.json`.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            window: WindowConfig::default(),
            split_ratios: [0.7, 0.2, 0.1],
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessingSection {
    pub baseline_s: f64,
    pub clamp: ClampLimit,
}

impl Default for PreprocessingSection {
    fn default() -> Self {
        PreprocessingSection {
            baseline_s: 0.5,
            clamp: ClampLimit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechSection {
    pub rep: SpeechRep,
    pub n_mels: usize,
}

impl Default for SpeechSection {
    fn default() -> Self {
        SpeechSection {
            rep: SpeechRep::External,
            n_mels: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    pub objective: Objective,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub updates_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            seed: 0,
            objective: Objective::Clip,
            batch_size: 256,
            adam: AdamConfig::default(),
            updates_per_epoch: 1200,
            max_epochs: 1000,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub top_k: Vec<usize>,
    pub restricted_n: usize,
    pub restricted_seed: u64,
    pub batch_size: usize,
    /// Write probability-weighted Mel reconstructions when audio exists.
    pub recon: bool,
    /// Number of Mel bands used for reconstructions.
    pub recon_mels: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            top_k: vec![1, 5, 10],
            restricted_n: 50,
            restricted_seed: 0,
            batch_size: 64,
            recon: true,
            recon_mels: 120,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub preprocessing: PreprocessingSection,
    pub speech: SpeechSection,
    pub model: BrainNetConfig,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses TOML text, then applies `key.path=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "<file>".into(),
            reason: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let de = toml::Value::Table(root);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            reason: strip_key_suffix(&e.inner().to_string()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        self.dataset.window.validate()?;
        if (self.dataset.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("dataset.split_ratios", "must sum to 1");
        }
        if !(self.preprocessing.baseline_s > 0.0) {
            return bad("preprocessing.baseline_s", "must be positive");
        }
        if self.preprocessing.baseline_s > self.dataset.window.duration_s() + 1e-9 {
            return bad("preprocessing.baseline_s", "baseline longer than the window");
        }
        if ![20, 40, 80, 120].contains(&self.speech.n_mels) {
            return bad("speech.n_mels", "must be one of 20, 40, 80, 120");
        }
        if ![20, 40, 80, 120].contains(&self.eval.recon_mels) {
            return bad("eval.recon_mels", "must be one of 20, 40, 80, 120");
        }
        if self.training.batch_size < 2 {
            return bad("training.batch_size", "must be at least 2");
        }
        if self.training.updates_per_epoch == 0 || self.training.max_epochs == 0 {
            return bad("training.updates_per_epoch", "epochs need at least one update");
        }
        if !(self.training.adam.lr > 0.0) {
            return bad("training.adam.lr", "must be positive");
        }
        if self.eval.restricted_n < 2 {
            return bad("eval.restricted_n", "must be at least 2");
        }
        if self.eval.top_k.is_empty() || self.eval.top_k.contains(&0) {
            return bad("eval.top_k", "need one or more k ≥ 1");
        }
        if self.eval.batch_size == 0 {
            return bad("eval.batch_size", "must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form. The dataset location is left
    /// out, so the same experiment run from another directory hashes alike.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset.path = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Drops the trailing `` in `key` `` some deserializers append, since the
/// key path is reported separately.
pub(crate) fn strip_key_suffix(msg: &str) -> String {
    match msg.rfind(" in `") {
        Some(i) if msg.ends_with('`') => msg[..i].to_string(),
        _ => msg.trim_end().to_string(),
    }
}

/// `a.b.c=value`, where `value` is parsed as a TOML value and falls back to
/// a plain string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        reason: "override must look like section.key=value".into(),
    })?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            reason: format!("`{p}` is not a section"),
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
