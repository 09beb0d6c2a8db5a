//! The trainable pair (brain encoder, optional Deep Mel encoder) and its
//! on-disk checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::binio;
use crate::brain::{BrainBatch, BrainNet, BrainNetConfig, Layout};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ops::{BatchNormStats, Mode};
use crate::optim::{AdamState, ParamStore};
use crate::pipeline::Frozen;
use crate::speech_features::{deep_mel_forward, deep_mel_net, SpeechRep};
use crate::tensor::Tensor;

pub struct Model {
    pub brain: BrainNet<f32>,
    /// Present when the speech representation is Deep Mel.
    pub speech: Option<BrainNet<f32>>,
}

/// Graph leaves for both networks.
pub struct Bound {
    pub brain: Vec<Var>,
    pub speech: Vec<Var>,
}

/// Brain network config with the data-dependent sizes filled in.
pub fn effective_config(cfg: &RunConfig, frozen: &Frozen) -> BrainNetConfig {
    let mut m = cfg.model.clone();
    m.in_channels = frozen.in_channels;
    m.subjects = frozen.subject_ids.len();
    if cfg.speech.rep != SpeechRep::DeepMel {
        m.out_features = frozen.target_dim;
    }
    m
}

impl Model {
    pub fn new(cfg: &RunConfig, frozen: &Frozen, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mc = effective_config(cfg, frozen);
        let speech = match cfg.speech.rep {
            SpeechRep::DeepMel => Some(deep_mel_net(&mc, frozen.target_dim, rng)?),
            _ => None,
        };
        let brain = BrainNet::new(mc, "brain.", rng)?;
        Ok(Model { brain, speech })
    }

    pub fn bind(&self, g: &mut Graph<f32>) -> Bound {
        Bound {
            brain: self.brain.bind(g),
            speech: self.speech.as_ref().map(|s| s.bind(g)).unwrap_or_default(),
        }
    }

    pub fn encode_brain<R: Rng>(
        &mut self,
        g: &mut Graph<f32>,
        vars: &Bound,
        batch: &BrainBatch<'_, f32>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        self.brain.forward(g, &vars.brain, batch, mode, rng)
    }

    /// Maps normalised targets to the latent space: identity, or the Deep
    /// Mel encoder.
    pub fn encode_speech<R: Rng>(
        &mut self,
        g: &mut Graph<f32>,
        vars: &Bound,
        y: &Tensor<f32>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match &mut self.speech {
            Some(net) => deep_mel_forward(net, g, &vars.speech, y, mode, rng),
            None => Ok(g.input(y.clone())),
        }
    }

    pub fn num_params(&self) -> usize {
        self.brain.num_params() + self.speech.as_ref().map_or(0, |s| s.num_params())
    }

    fn stores(&self) -> Vec<&ParamStore<f32>> {
        let mut v = vec![&self.brain.params];
        if let Some(s) = &self.speech {
            v.push(&s.params);
        }
        v
    }

    fn norms(&self) -> Vec<&BatchNormStats<f32>> {
        let mut v: Vec<_> = self.brain.norms.iter().collect();
        if let Some(s) = &self.speech {
            v.extend(s.norms.iter());
        }
        v
    }
}

/// Adam moments for both networks.
pub struct Optimizer {
    pub brain: AdamState<f32>,
    pub speech: Option<AdamState<f32>>,
}

impl Optimizer {
    pub fn new(model: &Model, cfg: &RunConfig) -> Self {
        Optimizer {
            brain: AdamState::new(&model.brain.params, cfg.training.adam),
            speech: model.speech.as_ref().map(|s| AdamState::new(&s.params, cfg.training.adam)),
        }
    }

    fn states(&self) -> Vec<&AdamState<f32>> {
        let mut v = vec![&self.brain];
        if let Some(s) = &self.speech {
            v.push(s);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub channels: usize,
    pub initialized: bool,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub valid_loss: f64,
    pub brain: BrainNetConfig,
    pub speech: Option<BrainNetConfig>,
    /// Layout of `params.bin` and, moment by moment, of `adam.bin`.
    pub tensors: Vec<TensorEntry>,
    /// Layout of `norms.bin`: running mean then variance per layer.
    pub norms: Vec<NormEntry>,
    pub adam_step: u64,
    pub frozen: Frozen,
    /// Windows read per split while producing this checkpoint.
    pub split_reads: BTreeMap<String, usize>,
    /// SHA-256 of `params.bin`.
    pub params_sha256: String,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct SaveInfo<'a> {
    pub config: &'a RunConfig,
    pub frozen: &'a Frozen,
    pub epoch: usize,
    pub valid_loss: f64,
    pub split_reads: &'a BTreeMap<String, usize>,
}

/// Writes a checkpoint into `dir`, replacing any previous one only once the
/// new one is complete.
pub fn save_checkpoint(dir: &Path, model: &Model, opt: &Optimizer, info: &SaveInfo<'_>) -> Result<()> {
    let mut tensors = Vec::new();
    let mut params = Vec::new();
    for store in model.stores() {
        for (name, t) in store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            params.extend_from_slice(t.data());
        }
    }
    let mut norm_entries = Vec::new();
    let mut norms = Vec::new();
    for n in model.norms() {
        norm_entries.push(NormEntry {
            channels: n.mean.len(),
            initialized: n.initialized,
        });
        norms.extend_from_slice(&n.mean);
        norms.extend_from_slice(&n.var);
    }
    let mut adam = Vec::new();
    for st in opt.states() {
        for m in &st.m {
            adam.extend_from_slice(m.data());
        }
    }
    for st in opt.states() {
        for v in &st.v {
            adam.extend_from_slice(v.data());
        }
    }
    let params_bytes = binio::f32_to_bytes(&params);
    let manifest = CheckpointManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: info.config.clone(),
        config_hash: info.config.hash(),
        seed: info.config.training.seed,
        epoch: info.epoch,
        valid_loss: info.valid_loss,
        brain: model.brain.config.clone(),
        speech: model.speech.as_ref().map(|s| s.config.clone()),
        tensors,
        norms: norm_entries,
        adam_step: opt.brain.step,
        frozen: info.frozen.clone(),
        split_reads: info.split_reads.clone(),
        params_sha256: hex(&params_bytes),
    };

    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.with_file_name(format!(".{name}.tmp"));
    let old = dir.with_file_name(format!(".{name}.old"));
    for p in [&tmp, &old] {
        if p.exists() {
            fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
    }
    binio::write_atomic(&tmp.join("params.bin"), &params_bytes)?;
    binio::write_f32(&tmp.join("norms.bin"), &norms)?;
    binio::write_f32(&tmp.join("adam.bin"), &adam)?;
    binio::write_json(&tmp.join("manifest.json"), &manifest)?;
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

/// Loads parameters and normalisation statistics. Adam moments are left on
/// disk; evaluation does not need them.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = binio::read_json(&dir.join("manifest.json"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let speech = match &manifest.speech {
        Some(c) => Some(BrainNet::new(c.clone(), "speech.", &mut rng)?),
        None => None,
    };
    let brain = BrainNet::new(manifest.brain.clone(), "brain.", &mut rng)?;
    let mut model = Model { brain, speech };

    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let params_path = dir.join("params.bin");
    let params = binio::read_f32(&params_path, total)?;
    if hex(&binio::f32_to_bytes(&params)) != manifest.params_sha256 {
        return Err(Error::format(&params_path, "checksum does not match the manifest"));
    }
    let mut offset = 0;
    let mut seen = 0;
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let chunk = &params[offset..offset + n];
        offset += n;
        let store = if entry.name.starts_with("speech.") {
            model.speech.as_mut().map(|s| &mut s.params)
        } else {
            Some(&mut model.brain.params)
        };
        let slot = store
            .as_ref()
            .and_then(|s| s.slot(&entry.name))
            .ok_or_else(|| Error::format(&params_path, format!("unexpected tensor {}", entry.name)))?;
        let store = store.unwrap();
        if store.get(slot).shape() != entry.shape.as_slice() {
            return Err(Error::format(&params_path, format!("shape mismatch for {}", entry.name)));
        }
        store.get_mut(slot).data_mut().copy_from_slice(chunk);
        seen += 1;
    }
    let expected = model.brain.params.len() + model.speech.as_ref().map_or(0, |s| s.params.len());
    if seen != expected {
        return Err(Error::format(&params_path, format!("{seen} tensors stored, model has {expected}")));
    }

    let norm_total: usize = manifest.norms.iter().map(|n| 2 * n.channels).sum();
    let norms_path = dir.join("norms.bin");
    let norms = binio::read_f32(&norms_path, norm_total)?;
    let mut layers: Vec<&mut BatchNormStats<f32>> = model.brain.norms.iter_mut().collect();
    if let Some(s) = model.speech.as_mut() {
        layers.extend(s.norms.iter_mut());
    }
    if layers.len() != manifest.norms.len() {
        return Err(Error::format(&norms_path, "batch-norm layer count mismatch"));
    }
    let mut offset = 0;
    for (layer, entry) in layers.into_iter().zip(&manifest.norms) {
        let c = entry.channels;
        if layer.mean.len() != c {
            return Err(Error::format(&norms_path, "batch-norm width mismatch"));
        }
        layer.mean.copy_from_slice(&norms[offset..offset + c]);
        layer.var.copy_from_slice(&norms[offset + c..offset + 2 * c]);
        layer.initialized = entry.initialized;
        offset += 2 * c;
    }
    Ok(Checkpoint { manifest, model })
}

/// Encodes windows in fixed-size chunks in eval mode; returns one `F×T`
/// latent per window.
pub fn encode_all(
    model: &mut Model,
    brain: &[&Tensor<f32>],
    subjects: &[usize],
    layout_of: &[usize],
    layouts: &[Layout],
    chunk: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(brain.len());
    for start in (0..brain.len()).step_by(chunk.max(1)) {
        let end = (start + chunk).min(brain.len());
        let x = Tensor::stack(&brain[start..end].iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let batch = BrainBatch {
            x: &x,
            subjects: &subjects[start..end],
            layout_of: &layout_of[start..end],
            layouts,
        };
        let z = model.encode_brain(&mut g, &vars, &batch, Mode::Eval, &mut rng)?;
        unstack(g.value(z), &mut out)?;
    }
    Ok(out)
}

/// Encodes speech targets in eval mode (identity unless Deep Mel).
pub fn encode_targets(model: &mut Model, targets: &[Tensor<f32>], chunk: usize) -> Result<Vec<Tensor<f32>>> {
    if model.speech.is_none() {
        return Ok(targets.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(targets.len());
    for start in (0..targets.len()).step_by(chunk.max(1)) {
        let end = (start + chunk).min(targets.len());
        let y = Tensor::stack(&targets[start..end])?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let v = model.encode_speech(&mut g, &vars, &y, Mode::Eval, &mut rng)?;
        unstack(g.value(v), &mut out)?;
    }
    Ok(out)
}

fn unstack(t: &Tensor<f32>, out: &mut Vec<Tensor<f32>>) -> Result<()> {
    let (b, f, n) = t.dims3()?;
    for i in 0..b {
        out.push(Tensor::from_vec(&[f, n], t.batch(i).to_vec())?);
    }
    Ok(())
}
