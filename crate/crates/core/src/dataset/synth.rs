//! Synthetic datasets from a known linear forward model.
//!
//! Each segment gets a smooth random latent `Y` (the "external" feature
//! target). Every subject hears every segment once in a random order, and
//! its recording is `X = A_s · P(Y) + ε`: `P` is a Gaussian temporal
//! smoothing delayed by `delay_s`, `A_s` a random per-subject mixing scaled
//! so the clean signal has unit RMS, and `ε` white noise of std `noise_std`.
//! The audio of a segment is a bank of carriers whose envelopes follow the
//! magnitude of the latent, plus distractor carriers with independent
//! envelopes, so the Mel spectrogram is a lossy, partly unrelated view of
//! what the brain encodes. With `loudness > 0` the whole waveform is also
//! scaled by a slow random gain that the brain never sees, as with the
//! loudness fluctuations of real speech.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{write_wav, EventRow, Manifest, SampleRates};
use super::{build_splits, Channel, Dataset, Recording, SegmentId, SpeechSegment, Split, Word, ANCHOR_OFFSET_S};
use crate::binio;
use crate::error::{Error, Result};
use crate::preprocessing::WORKING_RATE;
use crate::speech_features::{align_feature_rate, save_external_features, AUDIO_RATE};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub subjects: usize,
    pub segments: usize,
    pub channels: usize,
    pub features: usize,
    /// Noise std in units of the clean signal's RMS.
    pub noise_std: f64,
    pub seed: u64,
    pub brain_rate: f64,
    pub feature_rate: f64,
    pub segment_s: f64,
    pub gap_s: f64,
    pub lead_s: f64,
    pub delay_s: f64,
    /// Std of the latent's Gaussian smoothing, in feature frames.
    pub latent_smoothing: f64,
    /// Std of `P`, in working-rate samples.
    pub brain_smoothing: f64,
    pub vocab_size: usize,
    /// Words reserved for test anchors only (zero-shot analysis).
    pub held_out_words: usize,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub distractors: usize,
    /// Std, in natural-log units, of a slow broadband gain contour applied
    /// to the audio and absent from the brain signal.
    pub loudness: f64,
    pub audio: bool,
    pub split_ratios: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            name: "synthetic".into(),
            subjects: 2,
            segments: 200,
            channels: 32,
            features: 16,
            noise_std: 0.0,
            seed: 0,
            brain_rate: 240.0,
            feature_rate: 50.0,
            segment_s: 3.0,
            gap_s: 1.0,
            lead_s: 1.0,
            delay_s: 0.150,
            latent_smoothing: 1.5,
            brain_smoothing: 2.0,
            vocab_size: 60,
            held_out_words: 0,
            outlier_fraction: 0.0,
            outlier_scale: 1000.0,
            distractors: 16,
            loudness: 0.0,
            audio: true,
            split_ratios: [0.7, 0.2, 0.1],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("subjects", self.subjects),
            ("segments", self.segments),
            ("channels", self.channels),
            ("features", self.features),
            ("vocab_size", self.vocab_size),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config {
                    key: k.into(),
                    reason: "must be ≥ 1".into(),
                });
            }
        }
        let positive = [
            ("brain_rate", self.brain_rate),
            ("feature_rate", self.feature_rate),
            ("segment_s", self.segment_s),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config {
                    key: k.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        for (k, v) in [("noise_std", self.noise_std), ("loudness", self.loudness)] {
            if !(v >= 0.0) {
                return Err(Error::Config {
                    key: k.into(),
                    reason: "must be ≥ 0".into(),
                });
            }
        }
        if self.brain_rate < WORKING_RATE {
            return Err(Error::Config {
                key: "brain_rate".into(),
                reason: format!("must be at least the {WORKING_RATE} Hz working rate"),
            });
        }
        if self.held_out_words >= self.vocab_size {
            return Err(Error::Config {
                key: "held_out_words".into(),
                reason: "must leave at least one training word".into(),
            });
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config {
                key: "outlier_fraction".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        if self.gap_s < self.delay_s.abs() + 0.5 || self.lead_s < ANCHOR_OFFSET_S {
            return Err(Error::Config {
                key: "gap_s".into(),
                reason: "gaps must leave room for the shifted window".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub recordings: usize,
    pub segments: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let half = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-half..=half).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Smooths each row with `kernel` and delays it by `delay` samples; zero
/// outside the row.
fn smooth_rows(x: &[f64], rows: usize, cols: usize, kernel: &[f64], delay: isize) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        for t in 0..cols as isize {
            let src = t - delay;
            let mut acc = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let k = src + j as isize - half;
                if k >= 0 && (k as usize) < cols {
                    acc += w * row[k as usize];
                }
            }
            out[r * cols + t as usize] = acc;
        }
    }
    out
}

/// Pseudo-words built from a fixed syllable inventory, one per index.
pub fn pseudo_word(i: usize) -> String {
    const SYL: [&str; 12] = ["ka", "lo", "mi", "tu", "ren", "sa", "vo", "di", "ne", "pa", "zu", "fe"];
    let mut w = String::new();
    let mut n = i;
    loop {
        w.push_str(SYL[n % SYL.len()]);
        n /= SYL.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    if w.len() < 4 {
        w.push_str("ba");
    }
    w
}

/// Smooth, unit-variance random tracks, `rows × n`.
fn smooth_noise(rng: &mut ChaCha8Rng, rows: usize, n: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..rows * n).map(|_| rng.sample(StandardNormal)).collect();
    let kernel = gaussian_kernel(sigma);
    // kernel energy restores unit variance away from the edges
    let gain = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    smooth_rows(&white, rows, n, &kernel, 0).into_iter().map(|v| v / gain).collect()
}

fn envelope(v: f64) -> f64 {
    0.02 * (v * v + 0.1).sqrt()
}

fn synth_audio(latent120: &Tensor<f32>, distract120: &[f64], n_distract: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [f, t120] = latent120.shape()[..] else { unreachable!() };
    let n = (t120 as f64 / WORKING_RATE * AUDIO_RATE as f64).round() as usize;
    let total = f + n_distract;
    let freq = |j: usize| 200.0 * (6000.0f64 / 200.0).powf(j as f64 / (total.max(2) - 1) as f64);
    let interp = |row: &dyn Fn(usize) -> f64, i: usize| {
        let pos = i as f64 * WORKING_RATE / AUDIO_RATE as f64;
        let k = pos.floor() as usize;
        let w = pos - k as f64;
        if k + 1 >= t120 {
            row(t120 - 1)
        } else {
            row(k) * (1.0 - w) + row(k + 1) * w
        }
    };
    // latent and distractor carriers alternate across the spectrum
    let mut carriers = Vec::with_capacity(total);
    for i in 0..f.max(n_distract) {
        if i < f {
            carriers.push((true, i));
        }
        if i < n_distract {
            carriers.push((false, i));
        }
    }
    let mut audio = vec![0.0; n];
    for (j, &(is_latent, idx)) in carriers.iter().enumerate() {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let w = std::f64::consts::TAU * freq(j) / AUDIO_RATE as f64;
        let row: Box<dyn Fn(usize) -> f64> = if is_latent {
            Box::new(move |k| latent120.data()[idx * t120 + k] as f64)
        } else {
            Box::new(move |k| distract120[idx * t120 + k])
        };
        for (i, a) in audio.iter_mut().enumerate() {
            *a += envelope(interp(&*row, i)) * (w * i as f64 + phase).sin();
        }
    }
    let floor = Normal::new(0.0, 1e-3).expect("finite std");
    for a in &mut audio {
        *a += floor.sample(rng);
    }
    audio
}

/// Writes a complete interchange-format dataset to `out`, plus ground truth
/// under `out/truth/`.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let (s_n, v_n, c_n, f_n) = (spec.subjects, spec.segments, spec.channels, spec.features);
    let seg_len = (spec.segment_s * WORKING_RATE).round() as usize;
    let n_feat = (spec.segment_s * spec.feature_rate).round() as usize;

    // sensor layout shared by all subjects
    let mut rng = stream(spec.seed, 1);
    let channels: Vec<Channel> = (0..c_n)
        .map(|i| Channel {
            name: format!("ch{i:03}"),
            x: rng.random_range(0.0..1.0),
            y: rng.random_range(0.0..1.0),
        })
        .collect();

    // latents at the feature rate, then on the working grid
    let mut rng = stream(spec.seed, 2);
    let mut latents = Vec::with_capacity(v_n);
    let mut latents120 = Vec::with_capacity(v_n);
    for _ in 0..v_n {
        let raw = smooth_noise(&mut rng, f_n, n_feat, spec.latent_smoothing);
        let t = Tensor::from_vec(&[f_n, n_feat], raw.into_iter().map(|v| v as f32).collect())?;
        latents120.push(align_feature_rate(&t, spec.feature_rate, WORKING_RATE, spec.segment_s)?);
        latents.push(t);
    }

    // segments laid out along one source with gaps, anchored at +0.5 s
    let mut segments: Vec<SpeechSegment> = (0..v_n)
        .map(|v| SpeechSegment {
            id: SegmentId(v as u64),
            source: "story".into(),
            source_start_s: v as f64 * (spec.segment_s + 0.5),
            duration_s: spec.segment_s,
            words: vec![Word {
                onset_s: ANCHOR_OFFSET_S,
                duration_s: 0.3,
                text: String::new(),
            }],
        })
        .collect();
    let splits = build_splits(&segments, spec.split_ratios, spec.seed)?;

    let mut rng = stream(spec.seed, 3);
    let held = spec.held_out_words;
    for seg in &mut segments {
        let test = splits.get(seg.id) == Some(Split::Test);
        let anchor = if test && held > 0 && rng.random_bool(0.5) {
            rng.random_range(0..held)
        } else {
            rng.random_range(held..spec.vocab_size)
        };
        seg.words[0].text = pseudo_word(anchor);
        for onset in [1.2, 2.0] {
            if onset < spec.segment_s {
                seg.words.push(Word {
                    onset_s: onset,
                    duration_s: 0.3,
                    text: pseudo_word(rng.random_range(held..spec.vocab_size)),
                });
            }
        }
    }

    let period = spec.segment_s + spec.gap_s;
    let total_s = spec.lead_s + v_n as f64 * period + spec.gap_s;
    let t120 = (total_s * WORKING_RATE).round() as usize;
    let t_raw = (total_s * spec.brain_rate).round() as usize;
    let kernel = gaussian_kernel(spec.brain_smoothing);
    let delay = (spec.delay_s * WORKING_RATE).round() as isize;

    let mut recordings = Vec::with_capacity(s_n);
    let mut events = Vec::with_capacity(s_n);
    let mut mixings = Vec::with_capacity(s_n);
    for s in 0..s_n {
        let mut rng = stream(spec.seed, 100 + s as u64);
        let mut order: Vec<usize> = (0..v_n).collect();
        order.shuffle(&mut rng);

        let mut ycat = vec![0.0f64; f_n * t120];
        let mut evs = Vec::new();
        for (slot, &v) in order.iter().enumerate() {
            let t0 = spec.lead_s + slot as f64 * period;
            let off = (t0 * WORKING_RATE).round() as usize;
            let y = &latents120[v];
            for d in 0..f_n {
                for t in 0..seg_len {
                    ycat[d * t120 + off + t] = y.data()[d * seg_len + t] as f64;
                }
            }
            for (wi, w) in segments[v].words.iter().enumerate() {
                evs.push(EventRow {
                    onset_s: t0 + w.onset_s,
                    duration_s: w.duration_s,
                    word: w.text.clone(),
                    segment_id: (wi == 0).then_some(v as u64),
                });
            }
        }
        let p = smooth_rows(&ycat, f_n, t120, &kernel, delay);

        let normal = Normal::new(0.0, (1.0 / f_n as f64).sqrt()).expect("finite std");
        let mut a: Vec<f64> = (0..c_n * f_n).map(|_| normal.sample(&mut rng)).collect();
        let mut clean = vec![0.0f64; c_n * t120];
        gemm(
            1.0,
            MatRef::rm(&a, 0, c_n, f_n),
            MatRef::rm(&p, 0, f_n, t120),
            0.0,
            MatMut::rm(&mut clean, 0, c_n, t120),
        );
        let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();
        if rms > 0.0 {
            clean.iter_mut().for_each(|v| *v /= rms);
            a.iter_mut().for_each(|v| *v /= rms);
        }

        let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
        let mut raw = vec![0.0f32; c_n * t_raw];
        for ch in 0..c_n {
            let row = &clean[ch * t120..(ch + 1) * t120];
            for k in 0..t_raw {
                let pos = k as f64 * WORKING_RATE / spec.brain_rate;
                let i = pos.floor() as usize;
                let w = pos - i as f64;
                let v = if i + 1 >= t120 {
                    row[t120 - 1]
                } else {
                    row[i] * (1.0 - w) + row[i + 1] * w
                };
                let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                raw[ch * t_raw + k] = (v + n) as f32;
            }
        }
        let n_out = (spec.outlier_fraction * raw.len() as f64).round() as usize;
        for _ in 0..n_out {
            let i = rng.random_range(0..raw.len());
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            raw[i] += (sign * spec.outlier_scale) as f32;
        }

        let signal = Tensor::from_vec(&[c_n, t_raw], raw)?;
        recordings.push(Recording::new(s, "0".into(), channels.clone(), signal, spec.brain_rate)?);
        events.push(evs);
        mixings.push(a);
    }

    let dataset = Dataset {
        root: out.to_path_buf(),
        manifest: Manifest {
            name: spec.name.clone(),
            sample_rates: SampleRates {
                brain: spec.brain_rate,
                audio: AUDIO_RATE,
                features: Some(spec.feature_rate),
            },
            channel_count: c_n,
            subjects: (0..s_n).collect(),
            feature_kind: "external".into(),
            feature_dim: Some(f_n),
        },
        recordings,
        events,
        segments: segments.iter().map(|s| (s.id, s.clone())).collect::<BTreeMap<_, _>>(),
        splits: Some(splits.clone()),
    };
    dataset.save(out)?;

    let mut rng = stream(spec.seed, 4);
    for (v, seg) in segments.iter().enumerate() {
        save_external_features(&dataset.feature_path(seg.id), &latents[v], spec.feature_rate)?;
        let truth = out.join("truth").join(format!("latent_{}.bin", seg.id));
        binio::write_f32(&truth, latents120[v].data())?;
        binio::write_json(&binio::sidecar(&truth), &TruthSidecar { rows: f_n, cols: seg_len })?;
        if spec.audio {
            let distract = smooth_noise(&mut rng, spec.distractors, n_feat, spec.latent_smoothing);
            let distract = Tensor::from_vec(
                &[spec.distractors, n_feat],
                distract.into_iter().map(|v| v as f32).collect(),
            )?;
            let distract120 = if spec.distractors > 0 {
                align_feature_rate(&distract, spec.feature_rate, WORKING_RATE, spec.segment_s)?
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            } else {
                Vec::new()
            };
            let mut audio = synth_audio(&latents120[v], &distract120, spec.distractors, &mut rng);
            if spec.loudness > 0.0 {
                // four times slower than the latent, interpolated to audio rate
                let gain = smooth_noise(&mut rng, 1, n_feat, spec.latent_smoothing * 4.0);
                let step = spec.feature_rate / AUDIO_RATE as f64;
                for (i, a) in audio.iter_mut().enumerate() {
                    let pos = (i as f64 * step).min((n_feat - 1) as f64);
                    let k = (pos.floor() as usize).min(n_feat.saturating_sub(2));
                    let w = pos - k as f64;
                    let g = if n_feat > 1 { gain[k] * (1.0 - w) + gain[k + 1] * w } else { gain[0] };
                    *a *= (spec.loudness * g).exp();
                }
            }
            write_wav(&dataset.audio_path(seg.id), &audio)?;
        }
    }
    for (s, a) in mixings.iter().enumerate() {
        let p = out.join("truth").join(format!("mixing_{s}.bin"));
        let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        binio::write_f32(&p, &a32)?;
        binio::write_json(&binio::sidecar(&p), &TruthSidecar { rows: c_n, cols: f_n })?;
    }
    binio::write_json(&out.join("truth").join("spec.json"), spec)?;

    Ok(SynthSummary {
        recordings: s_n,
        segments: v_n,
        train: splits.count(Split::Train),
        valid: splits.count(Split::Valid),
        test: splits.count(Split::Test),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub rows: usize,
    pub cols: usize,
}

/// Reads a ground-truth matrix written by [`generate_synthetic`].
pub fn load_truth(path: &Path) -> Result<Tensor<f32>> {
    let meta: TruthSidecar = binio::read_json(&binio::sidecar(path))?;
    Tensor::from_vec(&[meta.rows, meta.cols], binio::read_f32(path, meta.rows * meta.cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_unique() {
        let words: std::collections::BTreeSet<String> = (0..500).map(pseudo_word).collect();
        assert_eq!(words.len(), 500);
    }

    #[test]
    fn smoothing_kernel_sums_to_one() {
        assert!((gaussian_kernel(2.0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn delay_moves_a_spike() {
        let mut x = vec![0.0; 40];
        x[10] = 1.0;
        let y = smooth_rows(&x, 1, 40, &[1.0], 18);
        assert_eq!(y[28], 1.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SynthSpec {
            segments: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            noise_std: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
