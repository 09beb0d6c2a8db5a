//! Data model: recordings, speech segments, samples and splits, plus the
//! on-disk interchange format and the synthetic forward-model generator.

mod format;
mod splits;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::brain::Layout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use format::{
    read_events, read_wav, write_events, write_wav, Dataset, EventRow, IngestSummary, Manifest, RecordingSidecar,
    SampleRates, SegmentRecord, WordRecord,
};
pub use splits::{build_splits, SplitAssignment};

/// Seconds from segment start to its anchor word.
pub const ANCHOR_OFFSET_S: f64 = 0.5;
const ANCHOR_TOLERANCE_S: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u64);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// One participant's continuous multichannel signal.
#[derive(Clone, Debug)]
pub struct Recording {
    pub subject_id: usize,
    pub run: String,
    pub channels: Vec<Channel>,
    /// `C×T`.
    pub signal: Tensor<f32>,
    pub sample_rate: f64,
}

impl Recording {
    pub fn new(subject_id: usize, run: String, channels: Vec<Channel>, signal: Tensor<f32>, sample_rate: f64) -> Result<Self> {
        let [c, t] = signal.shape()[..] else {
            return Err(Error::shape("recording", "signal must be C×T"));
        };
        if c == 0 || t == 0 {
            return Err(Error::invalid("signal", "recordings need at least one channel and one sample"));
        }
        if c != channels.len() {
            return Err(Error::shape("recording", format!("{} channel descriptors for {c} rows", channels.len())));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::invalid("sample_rate", format!("{sample_rate} is not a positive rate")));
        }
        for ch in &channels {
            if !(0.0..=1.0).contains(&ch.x) || !(0.0..=1.0).contains(&ch.y) {
                return Err(Error::invalid(
                    "positions",
                    format!("channel {} at ({}, {}) lies outside [0,1]²", ch.name, ch.x, ch.y),
                ));
            }
        }
        Ok(Recording {
            subject_id,
            run,
            channels,
            signal,
            sample_rate,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn n_samples(&self) -> usize {
        self.signal.shape()[1]
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.channels.iter().map(|c| [c.x, c.y]).collect())
    }

    /// `<subject>_<run>`, the file stem in `recordings/` and `events/`.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.subject_id, self.run)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Word {
    pub onset_s: f64,
    pub duration_s: f64,
    pub text: String,
}

/// A unique window of speech audio, the retrieval unit of evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechSegment {
    pub id: SegmentId,
    /// Audio source the segment was cut from.
    pub source: String,
    pub source_start_s: f64,
    pub duration_s: f64,
    /// Word onsets relative to segment start.
    pub words: Vec<Word>,
}

impl SpeechSegment {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("duration_s", format!("segment {} has non-positive duration", self.id)));
        }
        for w in &self.words {
            if !(0.0..self.duration_s).contains(&w.onset_s) {
                return Err(Error::invalid(
                    "words",
                    format!("word `{}` at {} s lies outside segment {}", w.text, w.onset_s, self.id),
                ));
            }
        }
        Ok(())
    }

    pub fn end_s(&self) -> f64 {
        self.source_start_s + self.duration_s
    }

    /// The word starting 500 ms after segment start.
    pub fn anchor_word(&self) -> Option<&Word> {
        self.words
            .iter()
            .find(|w| (w.onset_s - ANCHOR_OFFSET_S).abs() < ANCHOR_TOLERANCE_S)
    }

    pub fn overlaps(&self, other: &SpeechSegment) -> bool {
        self.source == other.source && self.source_start_s < other.end_s() && other.source_start_s < self.end_s()
    }
}

/// Window geometry around a word onset, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window start relative to the word onset (window begins `pre_s` before).
    pub pre_s: f64,
    /// Window end relative to the word onset.
    pub post_s: f64,
    /// Brain signal is taken this much later than the speech.
    pub shift_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            pre_s: 0.5,
            post_s: 2.5,
            shift_s: 0.150,
        }
    }
}

impl WindowConfig {
    /// Short windows of the isolated-word protocol, −300 ms to +500 ms.
    pub fn isolated_words() -> Self {
        WindowConfig {
            pre_s: 0.3,
            post_s: 0.5,
            ..Self::default()
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.pre_s + self.post_s
    }

    pub fn len(&self, rate: f64) -> usize {
        (self.duration_s() * rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.duration_s() <= 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pre_s >= 0.0) || !(self.post_s > 0.0) || !self.shift_s.is_finite() {
            return Err(Error::Config {
                key: "dataset.window".into(),
                reason: "need pre_s ≥ 0, post_s > 0 and a finite shift".into(),
            });
        }
        Ok(())
    }
}

/// An aligned (brain window, speech segment, subject) triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub recording: usize,
    pub subject_id: usize,
    pub segment: SegmentId,
    pub speech_start: usize,
    pub brain_start: usize,
    pub len: usize,
}

/// Locates the speech and brain windows for a word onset in a recording
/// already at `rate` Hz with `n_samples` samples.
pub fn extract_sample(
    recording: usize,
    subject_id: usize,
    n_samples: usize,
    rate: f64,
    segment: SegmentId,
    word_onset_s: f64,
    window: &WindowConfig,
) -> Result<Sample> {
    let len = window.len(rate);
    let speech_start = ((word_onset_s - window.pre_s) * rate).round();
    let brain_start = speech_start + (window.shift_s * rate).round();
    let lo = speech_start.min(brain_start);
    let hi = speech_start.max(brain_start) + len as f64;
    if lo < 0.0 || hi > n_samples as f64 {
        return Err(Error::OutOfBounds(format!(
            "word at {word_onset_s:.3} s (segment {segment}) needs samples [{lo}, {hi}) of a {n_samples}-sample recording"
        )));
    }
    Ok(Sample {
        recording,
        subject_id,
        segment,
        speech_start: speech_start as usize,
        brain_start: brain_start as usize,
        len,
    })
}

/// Lowercases and strips leading/trailing punctuation.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || (!c.is_alphanumeric() && !c.is_ascii()))
        .to_lowercase()
}

/// `|test ∩ train| / |test|` over normalised tokens.
pub fn word_overlap(train_vocab: &BTreeSet<String>, test_vocab: &BTreeSet<String>) -> Result<f64> {
    let norm = |v: &BTreeSet<String>| -> BTreeSet<String> {
        v.iter().map(|w| normalize_token(w)).filter(|w| !w.is_empty()).collect()
    };
    let (train, test) = (norm(train_vocab), norm(test_vocab));
    if test.is_empty() {
        return Err(Error::invalid("test_vocab", "test vocabulary is empty"));
    }
    Ok(test.intersection(&train).count() as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        let w = WindowConfig::default();
        let s = extract_sample(0, 0, 5000, 120.0, SegmentId(1), 10.0, &w).unwrap();
        assert_eq!((s.speech_start, s.speech_start + s.len), (1140, 1500));
        assert_eq!((s.brain_start, s.brain_start + s.len), (1158, 1518));

        let zero = WindowConfig { shift_s: 0.0, ..w.clone() };
        let s0 = extract_sample(0, 0, 5000, 120.0, SegmentId(1), 10.0, &zero).unwrap();
        assert_eq!(s0.speech_start, s0.brain_start);

        let late = WindowConfig { shift_s: 0.3, ..w.clone() };
        let s3 = extract_sample(0, 0, 5000, 120.0, SegmentId(1), 10.0, &late).unwrap();
        assert_eq!(s3.brain_start - s3.speech_start, 36);

        assert!(matches!(
            extract_sample(0, 0, 1510, 120.0, SegmentId(1), 10.0, &w),
            Err(Error::OutOfBounds(_))
        ));
        assert!(extract_sample(0, 0, 5000, 120.0, SegmentId(1), 0.2, &w).is_err());
        assert_eq!(WindowConfig::isolated_words().len(120.0), 96);
    }

    #[test]
    fn overlap_examples() {
        let set = |w: &[&str]| w.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert!((word_overlap(&set(&["a", "b", "c"]), &set(&["b", "c", "d"])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(word_overlap(&set(&["a", "b", "c"]), &set(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(word_overlap(&set(&["a"]), &set(&["z"])).unwrap(), 0.0);
        assert!(word_overlap(&set(&["a"]), &set(&[])).is_err());
        assert_eq!(word_overlap(&set(&["Hello"]), &set(&["hello,"])).unwrap(), 1.0);
    }

    #[test]
    fn token_normalisation() {
        assert_eq!(normalize_token("\"Thank,"), "thank");
        assert_eq!(normalize_token("don't."), "don't");
        assert_eq!(normalize_token("YOU!"), "you");
    }

    #[test]
    fn recording_rejects_bad_positions() {
        let ch = vec![Channel { name: "a".into(), x: 1.5, y: 0.0 }];
        assert!(Recording::new(0, "0".into(), ch, Tensor::zeros(&[1, 4]), 100.0).is_err());
    }

    proptest! {
        #[test]
        fn shift_is_exact_in_samples(onset in 1.0f64..50.0, shift in 0.0f64..0.5) {
            let w = WindowConfig { shift_s: shift, ..Default::default() };
            let s = extract_sample(0, 0, 10_000, 120.0, SegmentId(0), onset, &w).unwrap();
            prop_assert_eq!(s.brain_start - s.speech_start, (shift * 120.0).round() as usize);
            prop_assert_eq!(s.len, 360);
        }
    }
}
