//! Turns an on-disk dataset into model-ready windows: resample, extract,
//! baseline-correct, robust-scale, clamp, and build aligned speech targets.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::brain::{BrainBatch, Layout};
use crate::config::RunConfig;
use crate::dataset::{build_splits, extract_sample, normalize_token, read_wav, Dataset, Sample, SegmentId, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::preprocessing::{baseline_correct, clamp, resample, robust_scale, ScalerParams, WORKING_RATE};
use crate::speech_features::{
    align_feature_rate, load_external_features, log_compress, mel_spectrogram, FeatureStats, MelConfig, SpeechRep, LOG_EPS,
};
use crate::tensor::Tensor;

/// Records which splits were read and refuses splits outside the allowed
/// set, so training can prove it never touched test data.
#[derive(Clone, Debug)]
pub struct SplitGuard {
    allowed: BTreeSet<Split>,
    reads: BTreeMap<Split, usize>,
}

impl SplitGuard {
    pub fn new(allowed: &[Split]) -> Self {
        SplitGuard {
            allowed: allowed.iter().copied().collect(),
            reads: BTreeMap::new(),
        }
    }

    pub fn read(&mut self, split: Split, id: SegmentId) -> Result<()> {
        if !self.allowed.contains(&split) {
            return Err(Error::SplitAccess(format!(
                "segment {id} belongs to the {} split, which this run may not read",
                split.name()
            )));
        }
        *self.reads.entry(split).or_default() += 1;
        Ok(())
    }

    /// Read counts keyed by split name.
    pub fn reads(&self) -> BTreeMap<String, usize> {
        self.reads.iter().map(|(s, n)| (s.name().to_string(), *n)).collect()
    }
}

/// Everything fitted on training data that evaluation must reuse as-is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frozen {
    /// Model subject index `i` is dataset subject `subject_ids[i]`.
    pub subject_ids: Vec<usize>,
    /// Scaler per recording stem.
    pub scalers: BTreeMap<String, ScalerParams>,
    pub feature_stats: FeatureStats,
    pub in_channels: usize,
    pub target_dim: usize,
    pub window_len: usize,
    /// Normalised anchor words of the training segments.
    pub train_vocab: BTreeSet<String>,
}

impl Frozen {
    pub fn subject_index(&self, subject_id: usize) -> usize {
        self.subject_ids
            .iter()
            .position(|&s| s == subject_id)
            .unwrap_or(self.subject_ids.len())
    }
}

/// One model-ready brain window.
#[derive(Clone, Debug)]
pub struct Window {
    pub sample: Sample,
    pub brain: Tensor<f32>,
    /// Model subject index.
    pub subject: usize,
    /// Index into `Prepared::layouts`.
    pub layout: usize,
    /// Index into the split's `segments`/`targets`.
    pub target: usize,
}

/// Brain, targets, subject indices, layout indices.
pub type Batch = (Tensor<f32>, Tensor<f32>, Vec<usize>, Vec<usize>);

#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub windows: Vec<Window>,
    /// Unique segments of the split in id order; the candidate set.
    pub segments: Vec<SegmentId>,
    /// Normalised speech targets, parallel to `segments`.
    pub targets: Vec<Tensor<f32>>,
    /// Anchor word per segment, parallel to `segments`.
    pub words: Vec<String>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Stacks the listed windows into a `B×C×T` brain tensor and a
    /// `B×F×T` target tensor, with per-window subject and layout indices.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let brain: Vec<Tensor<f32>> = idx.iter().map(|&i| self.windows[i].brain.clone()).collect();
        let target: Vec<Tensor<f32>> = idx.iter().map(|&i| self.targets[self.windows[i].target].clone()).collect();
        let subjects = idx.iter().map(|&i| self.windows[i].subject).collect();
        let layouts = idx.iter().map(|&i| self.windows[i].layout).collect();
        Ok((Tensor::stack(&brain)?, Tensor::stack(&target)?, subjects, layouts))
    }
}

/// Borrowed view handed to the brain network.
pub fn brain_batch<'a>(x: &'a Tensor<f32>, subjects: &'a [usize], layout_of: &'a [usize], layouts: &'a [Layout]) -> BrainBatch<'a, f32> {
    BrainBatch {
        x,
        subjects,
        layout_of,
        layouts,
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub frozen: Frozen,
    pub layouts: Vec<Layout>,
    pub assignment: SplitAssignment,
    pub splits: BTreeMap<Split, SplitData>,
    pub reads: BTreeMap<String, usize>,
    /// Windows skipped, with reasons.
    pub skipped: Vec<String>,
}

impl Prepared {
    pub fn split(&self, s: Split) -> Result<&SplitData> {
        self.splits
            .get(&s)
            .ok_or_else(|| Error::SplitAccess(format!("the {} split was not prepared", s.name())))
    }
}

/// The split assignment shipped with the dataset, or one drawn from the
/// configured ratios and seed.
pub fn assignment(ds: &Dataset, cfg: &RunConfig) -> Result<SplitAssignment> {
    match &ds.splits {
        Some(s) => Ok(s.clone()),
        None => {
            let segs: Vec<_> = ds.segments.values().cloned().collect();
            build_splits(&segs, cfg.dataset.split_ratios, cfg.dataset.split_seed)
        }
    }
}

/// Normalised anchor words of all segments in `split`.
pub fn split_vocab(ds: &Dataset, a: &SplitAssignment, split: Split) -> BTreeSet<String> {
    a.ids(split)
        .filter_map(|id| ds.segments.get(&id))
        .filter_map(|s| s.anchor_word())
        .map(|w| normalize_token(&w.text))
        .filter(|w| !w.is_empty())
        .collect()
}

/// Prepares the requested splits. Without `frozen`, `Train` must be among
/// them: scalers and feature statistics are fitted on its windows.
pub fn prepare(ds: &Dataset, cfg: &RunConfig, wanted: &[Split], frozen: Option<&Frozen>) -> Result<Prepared> {
    if frozen.is_none() && !wanted.contains(&Split::Train) {
        return Err(Error::State("fitting normalisers requires the train split".into()));
    }
    let assignment = assignment(ds, cfg)?;
    let mut guard = SplitGuard::new(wanted);
    let window = &cfg.dataset.window;
    let len = window.len(WORKING_RATE);
    let baseline = (cfg.preprocessing.baseline_s * WORKING_RATE).round() as usize;
    let in_channels = ds.manifest.channel_count;
    if let Some(f) = frozen {
        if f.in_channels != in_channels {
            return Err(Error::invalid(
                "dataset",
                format!("{in_channels} channels, the model expects {}", f.in_channels),
            ));
        }
        if f.window_len != len {
            return Err(Error::invalid(
                "dataset.window",
                format!("window of {len} samples, the model was trained on {}", f.window_len),
            ));
        }
    }

    let mut subject_ids: Vec<usize> = ds.recordings.iter().map(|r| r.subject_id).collect();
    subject_ids.sort_unstable();
    subject_ids.dedup();

    // raw windows per split, before scaling
    let mut raw: BTreeMap<Split, Vec<Window>> = wanted.iter().map(|&s| (s, Vec::new())).collect();
    let mut layouts = Vec::new();
    let mut skipped = Vec::new();
    for (ri, (rec, events)) in ds.recordings.iter().zip(&ds.events).enumerate() {
        if rec.n_channels() != in_channels {
            return Err(Error::format(
                ds.root.join("recordings").join(format!("{}.json", rec.stem())),
                format!("{} channels, manifest says {in_channels}", rec.n_channels()),
            ));
        }
        layouts.push(rec.layout()?);
        let subject = match frozen {
            Some(f) => f.subject_index(rec.subject_id),
            None => subject_ids.iter().position(|&s| s == rec.subject_id).unwrap(),
        };
        let mut resampled: Option<Tensor<f32>> = None;
        for ev in events {
            let Some(raw_id) = ev.segment_id else { continue };
            let id = SegmentId(raw_id);
            let Some(split) = assignment.get(id) else {
                debug!("{}: segment {id} is excluded from every split", rec.stem());
                continue;
            };
            if !wanted.contains(&split) {
                continue;
            }
            guard.read(split, id)?;
            let signal = match &resampled {
                Some(s) => s,
                None => resampled.insert(resample(&rec.signal, rec.sample_rate, WORKING_RATE)?),
            };
            let n = signal.shape()[1];
            let sample = match extract_sample(ri, rec.subject_id, n, WORKING_RATE, id, ev.onset_s, window) {
                Ok(s) => s,
                Err(Error::OutOfBounds(why)) => {
                    let msg = format!("{}: skipped, {why}", rec.stem());
                    warn!("{msg}");
                    skipped.push(msg);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut brain = slice_time(signal, sample.brain_start, len)?;
            baseline_correct(&mut brain, baseline)?;
            raw.get_mut(&split).unwrap().push(Window {
                sample,
                brain,
                subject,
                layout: ri,
                target: usize::MAX,
            });
        }
    }

    let scalers = match frozen {
        Some(f) => f.scalers.clone(),
        None => fit_scalers(ds, &raw[&Split::Train])?,
    };
    let limit = cfg.preprocessing.clamp.0.map(|l| l as f32);
    for windows in raw.values_mut() {
        for w in windows.iter_mut() {
            let stem = ds.recordings[w.sample.recording].stem();
            let params = scalers
                .get(&stem)
                .ok_or_else(|| Error::State(format!("no fitted scaler for recording {stem}")))?;
            robust_scale(&mut w.brain, params)?;
            clamp(w.brain.data_mut(), limit);
        }
    }

    // speech targets for the segments that ended up with windows
    let mut raw_targets: BTreeMap<Split, (Vec<SegmentId>, Vec<Tensor<f32>>)> = BTreeMap::new();
    for (&split, windows) in &raw {
        let ids: BTreeSet<SegmentId> = windows.iter().map(|w| w.sample.segment).collect();
        let ids: Vec<SegmentId> = ids.into_iter().collect();
        let mut targets = Vec::with_capacity(ids.len());
        for &id in &ids {
            targets.push(segment_target(ds, cfg, id, len)?);
        }
        raw_targets.insert(split, (ids, targets));
    }
    let feature_stats = match frozen {
        Some(f) => f.feature_stats.clone(),
        None => FeatureStats::fit(raw_targets[&Split::Train].1.iter())?,
    };
    let target_dim = feature_stats.mean.len();
    if let Some(f) = frozen {
        if f.target_dim != target_dim {
            return Err(Error::invalid(
                "speech",
                format!("targets have {target_dim} dimensions, the model expects {}", f.target_dim),
            ));
        }
    }

    let mut splits = BTreeMap::new();
    for (split, mut windows) in raw {
        let (ids, targets) = raw_targets.remove(&split).unwrap();
        let targets = targets.iter().map(|t| feature_stats.apply(t)).collect::<Result<Vec<_>>>()?;
        for w in &mut windows {
            w.target = ids.binary_search(&w.sample.segment).unwrap();
        }
        let words = ids
            .iter()
            .map(|id| {
                ds.segments[id]
                    .anchor_word()
                    .map(|w| normalize_token(&w.text))
                    .unwrap_or_default()
            })
            .collect();
        info!("{} split: {} windows over {} segments", split.name(), windows.len(), ids.len());
        splits.insert(
            split,
            SplitData {
                split,
                windows,
                segments: ids,
                targets,
                words,
            },
        );
    }

    let frozen = match frozen {
        Some(f) => f.clone(),
        None => Frozen {
            subject_ids,
            scalers,
            feature_stats,
            in_channels,
            target_dim,
            window_len: len,
            train_vocab: split_vocab(ds, &assignment, Split::Train),
        },
    };
    Ok(Prepared {
        frozen,
        layouts,
        assignment,
        splits,
        reads: guard.reads(),
        skipped,
    })
}

fn slice_time(signal: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let (c, t) = (signal.shape()[0], signal.shape()[1]);
    if start + len > t {
        return Err(Error::OutOfBounds(format!("[{start}, {}) beyond {t} samples", start + len)));
    }
    let src = signal.data();
    let mut out = Vec::with_capacity(c * len);
    for ch in 0..c {
        out.extend_from_slice(&src[ch * t + start..ch * t + start + len]);
    }
    Tensor::from_vec(&[c, len], out)
}

fn fit_scalers(ds: &Dataset, train: &[Window]) -> Result<BTreeMap<String, ScalerParams>> {
    let mut by_rec: BTreeMap<usize, Vec<&Tensor<f32>>> = BTreeMap::new();
    for w in train {
        by_rec.entry(w.sample.recording).or_default().push(&w.brain);
    }
    let mut out = BTreeMap::new();
    for (ri, chunks) in by_rec {
        let stem = ds.recordings[ri].stem();
        let params = ScalerParams::fit(chunks).map_err(|e| match e {
            Error::DegenerateChannel { channel, reason } => Error::DegenerateChannel {
                channel,
                reason: format!("{reason} (recording {stem})"),
            },
            e => e,
        })?;
        out.insert(stem, params);
    }
    Ok(out)
}

/// Log-Mel of a segment's audio at the 120 Hz working rate, unnormalised,
/// covering the full segment.
pub fn segment_log_mel(ds: &Dataset, id: SegmentId, n_mels: usize) -> Result<Tensor<f32>> {
    let seg = &ds.segments[&id];
    let audio = read_wav(&ds.audio_path(id))?;
    let mel_cfg = MelConfig {
        n_mels,
        ..MelConfig::default()
    };
    let mel = log_compress(&mel_spectrogram(&audio, &mel_cfg)?, LOG_EPS)?;
    align_feature_rate(&mel.cast(), mel_cfg.frame_rate(), WORKING_RATE, seg.duration_s)
}

/// Unnormalised target for one segment, cut to the speech window.
fn segment_target(ds: &Dataset, cfg: &RunConfig, id: SegmentId, len: usize) -> Result<Tensor<f32>> {
    let seg = &ds.segments[&id];
    let full = match cfg.speech.rep {
        SpeechRep::External => {
            if !ds.has_features() {
                return Err(Error::invalid(
                    "speech.rep",
                    "external features requested but the dataset ships none",
                ));
            }
            let (f, rate) = load_external_features(&ds.feature_path(id))?;
            align_feature_rate(&f, rate, WORKING_RATE, seg.duration_s)?
        }
        SpeechRep::Mel | SpeechRep::DeepMel => segment_log_mel(ds, id, cfg.speech.n_mels)?,
    };
    let anchor = seg
        .anchor_word()
        .map(|w| w.onset_s)
        .unwrap_or(crate::dataset::ANCHOR_OFFSET_S);
    let start = ((anchor - cfg.dataset.window.pre_s) * WORKING_RATE).round();
    if start < 0.0 {
        return Err(Error::OutOfBounds(format!("segment {id}: speech window starts before the segment")));
    }
    slice_time(&full, start as usize, len).map_err(|_| {
        Error::OutOfBounds(format!(
            "segment {id}: speech window [{start}, {}) exceeds the {}-frame target",
            start as usize + len,
            full.shape()[1]
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{generate_synthetic, SynthSpec};

    fn tiny(dir: &std::path::Path) -> Dataset {
        let spec = SynthSpec {
            segments: 30,
            channels: 8,
            features: 4,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn guard_refuses_disallowed_split() {
        let mut g = SplitGuard::new(&[Split::Train, Split::Valid]);
        g.read(Split::Train, SegmentId(0)).unwrap();
        assert!(matches!(g.read(Split::Test, SegmentId(1)), Err(Error::SplitAccess(_))));
        assert_eq!(g.reads()["train"], 1);
    }

    #[test]
    fn training_preparation_never_reads_test() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(dir.path());
        let cfg = RunConfig::default();
        let p = prepare(&ds, &cfg, &[Split::Train, Split::Valid], None).unwrap();
        assert!(!p.reads.contains_key("test"));
        assert!(!p.splits.contains_key(&Split::Test));
        let train = p.split(Split::Train).unwrap();
        assert_eq!(train.windows[0].brain.shape(), &[8, 360]);
        assert_eq!(train.targets[0].shape(), &[4, 360]);
        // both subjects contribute
        let subs: BTreeSet<usize> = train.windows.iter().map(|w| w.subject).collect();
        assert_eq!(subs.len(), 2);
        for w in &train.windows {
            assert!(w.brain.data().iter().all(|v| v.abs() <= 20.0));
            assert_eq!(w.sample.brain_start - w.sample.speech_start, 18);
        }
    }

    #[test]
    fn frozen_state_is_reused_for_test() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(dir.path());
        let cfg = RunConfig::default();
        let p = prepare(&ds, &cfg, &[Split::Train], None).unwrap();
        let q = prepare(&ds, &cfg, &[Split::Test], Some(&p.frozen)).unwrap();
        assert_eq!(p.frozen, q.frozen);
        assert!(!q.split(Split::Test).unwrap().is_empty());
        assert!(prepare(&ds, &cfg, &[Split::Test], None).is_err());
    }

    #[test]
    fn mel_targets_have_n_mels_rows() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(dir.path());
        let cfg = RunConfig::from_toml("[speech]\nrep = \"mel\"\nn_mels = 20\n", &[]).unwrap();
        let p = prepare(&ds, &cfg, &[Split::Train], None).unwrap();
        assert_eq!(p.frozen.target_dim, 20);
        let train = p.split(Split::Train).unwrap();
        // standardised on train
        let n = train.targets.len() as f64 * 360.0;
        let mean: f64 = train.targets.iter().map(|t| t.data()[..360].iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4);
    }
}
