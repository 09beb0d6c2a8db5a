//! Speech-side targets: log-Mel spectrograms, externally computed feature
//! files, rate alignment to the working grid, standardisation and the
//! learnable Deep Mel encoder.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::binio;
use crate::brain::{BrainBatch, BrainNet, BrainNetConfig};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

pub const AUDIO_RATE: u32 = 16_000;
pub const LOG_EPS: f64 = 1e-5;
/// How far a feature track may fall short of the window before alignment
/// refuses it. Beyond the last frame the final value is held.
pub const ALIGN_TOLERANCE_S: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeechRep {
    Mel,
    DeepMel,
    #[default]
    External,
}

impl FromStr for SpeechRep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mel" => Ok(SpeechRep::Mel),
            "deep-mel" => Ok(SpeechRep::DeepMel),
            "external" => Ok(SpeechRep::External),
            _ => Err(Error::invalid("speech_rep", format!("`{s}` is not one of mel, deep-mel, external"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_mels: usize,
    pub frame: usize,
    pub hop: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            n_mels: 120,
            frame: 512,
            hop: 128,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn frame_rate(&self) -> f64 {
        AUDIO_RATE as f64 / self.hop as f64
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn triangle(f: f64, lo: f64, centre: f64, hi: f64) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f <= centre {
        (f - lo) / (centre - lo)
    } else {
        (hi - f) / (hi - centre)
    }
}

/// ∫ of the unit-peak triangle (lo, centre, hi) over `[a, b]`.
fn triangle_integral(a: f64, b: f64, lo: f64, centre: f64, hi: f64) -> f64 {
    // piecewise linear between breakpoints, so the trapezoid rule is exact
    let mut pts = vec![a, b];
    pts.extend([lo, centre, hi].into_iter().filter(|&p| p > a && p < b));
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.windows(2)
        .map(|w| 0.5 * (triangle(w[0], lo, centre, hi) + triangle(w[1], lo, centre, hi)) * (w[1] - w[0]))
        .sum()
}

/// `n_mels × (frame/2 + 1)` triangular filterbank on the HTK Mel scale.
///
/// Unit-peak triangles are sampled at bin centres. A triangle too narrow to
/// contain any bin centre (low bands at high `n_mels`) instead weighs each
/// bin by the triangle's mean over the bin's frequency interval, so no band
/// is empty.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Tensor<f64>> {
    if ![20, 40, 80, 120].contains(&cfg.n_mels) {
        return Err(Error::invalid("n_mels", format!("{} is not one of 20, 40, 80, 120", cfg.n_mels)));
    }
    let n_bins = cfg.frame / 2 + 1;
    let df = AUDIO_RATE as f64 / cfg.frame as f64;
    let (m_lo, m_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[cfg.n_mels, n_bins]);
    let data = fb.data_mut();
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut data[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * df;
            *w = triangle(f, lo, c, hi);
        }
        if row.iter().all(|&w| w == 0.0) {
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * df;
                *w = triangle_integral(f - df / 2.0, f + df / 2.0, lo, c, hi) / df;
            }
        }
    }
    Ok(fb)
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT, `(frame/2 + 1) × T_feat`, divided by the frame length.
pub fn stft_magnitude(audio: &[f64], frame: usize, hop: usize) -> Result<Tensor<f64>> {
    if audio.len() < frame {
        return Err(Error::invalid(
            "audio",
            format!("{} samples is shorter than one {frame}-sample frame", audio.len()),
        ));
    }
    let n_frames = 1 + (audio.len() - frame) / hop;
    let n_bins = frame / 2 + 1;
    let window = hann(frame);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(frame);
    let mut buf = vec![Complex::new(0.0, 0.0); frame];
    let mut out = Tensor::zeros(&[n_bins, n_frames]);
    let scale = 1.0 / frame as f64;
    for t in 0..n_frames {
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(audio[t * hop + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out.data_mut()[k * n_frames + t] = buf[k].norm() * scale;
        }
    }
    Ok(out)
}

/// Mel spectrogram (before log compression) of 16 kHz mono audio.
pub fn mel_spectrogram(audio: &[f64], cfg: &MelConfig) -> Result<Tensor<f64>> {
    let fb = mel_filterbank(cfg)?;
    let spec = stft_magnitude(audio, cfg.frame, cfg.hop)?;
    apply_filterbank(&fb, &spec)
}

pub fn apply_filterbank(fb: &Tensor<f64>, spec: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (&[m, k], &[k2, t]) = (fb.shape(), spec.shape()) else {
        return Err(Error::shape("mel", "filterbank and spectrum must be matrices"));
    };
    if k != k2 {
        return Err(Error::shape("mel", format!("filterbank {:?} vs spectrum {:?}", fb.shape(), spec.shape())));
    }
    let mut out = Tensor::zeros(&[m, t]);
    gemm(
        1.0,
        MatRef::rm(fb.data(), 0, m, k),
        MatRef::rm(spec.data(), 0, k, t),
        0.0,
        MatMut::rm(out.data_mut(), 0, m, t),
    );
    Ok(out)
}

/// Elementwise `log(eps + mel)`.
pub fn log_compress(mel: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>> {
    if let Some(v) = mel.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid("mel", format!("log compression needs non-negative input, got {v}")));
    }
    Ok(mel.map(|v| (eps + v).ln()))
}

/// Linearly interpolates an `F×T_feat` track sampled at `rate` (frame `k`
/// at time `k / rate`) onto `round(duration · target_rate)` frames.
pub fn align_feature_rate(features: &Tensor<f32>, rate: f64, target_rate: f64, duration: f64) -> Result<Tensor<f32>> {
    let [f, t_feat] = features.shape()[..] else {
        return Err(Error::shape("align_feature_rate", "features must be F×T"));
    };
    if !(rate > 0.0) || !(target_rate > 0.0) {
        return Err(Error::invalid("rate", "feature and target rates must be positive"));
    }
    let span = t_feat as f64 / rate;
    if t_feat == 0 || span < duration - ALIGN_TOLERANCE_S {
        return Err(Error::invalid(
            "features",
            format!("feature track covers {span:.3} s, window needs {duration:.3} s"),
        ));
    }
    let n = (duration * target_rate).round() as usize;
    let src = features.data();
    let mut out = Vec::with_capacity(f * n);
    for ch in 0..f {
        let row = &src[ch * t_feat..(ch + 1) * t_feat];
        for i in 0..n {
            let pos = i as f64 / target_rate * rate;
            let k = pos.floor() as usize;
            let v = if k + 1 >= t_feat {
                row[t_feat - 1] as f64
            } else {
                let w = pos - k as f64;
                row[k] as f64 * (1.0 - w) + row[k + 1] as f64 * w
            };
            out.push(v as f32);
        }
    }
    Tensor::from_vec(&[f, n], out)
}

/// Per-dimension mean and standard deviation over training segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn fit<'a>(segments: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for seg in segments {
            let [f, t] = seg.shape()[..] else {
                return Err(Error::shape("feature_stats", "features must be F×T"));
            };
            if sum.is_empty() {
                sum = vec![0.0; f];
                sq = vec![0.0; f];
            } else if sum.len() != f {
                return Err(Error::shape("feature_stats", "segments differ in feature count"));
            }
            for d in 0..f {
                for &v in &seg.data()[d * t..(d + 1) * t] {
                    sum[d] += v as f64;
                    sq[d] += v as f64 * v as f64;
                }
            }
            count += t;
        }
        if count == 0 {
            return Err(Error::invalid("segments", "no training features to fit on"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut std = Vec::with_capacity(mean.len());
        for (d, (&m, &q)) in mean.iter().zip(&sq).enumerate() {
            let var = (q / n - m * m).max(0.0);
            if var <= 1e-12 * (1.0 + m * m) {
                return Err(Error::DegenerateChannel {
                    channel: d,
                    reason: "feature dimension has zero variance on the training set".into(),
                });
            }
            std.push(var.sqrt());
        }
        Ok(FeatureStats { mean, std })
    }

    pub fn apply(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [f, t] = features.shape()[..] else {
            return Err(Error::shape("feature_normalize", "features must be F×T"));
        };
        if f != self.mean.len() {
            return Err(Error::shape(
                "feature_normalize",
                format!("stats fitted on {} dims, features have {f}", self.mean.len()),
            ));
        }
        let mut out = features.clone();
        for d in 0..f {
            for v in &mut out.data_mut()[d * t..(d + 1) * t] {
                *v = ((*v as f64 - self.mean[d]) / self.std[d]) as f32;
            }
        }
        Ok(out)
    }
}

/// Sidecar of a feature blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "T_feat")]
    pub t_feat: usize,
    pub feature_rate: f64,
}

pub fn save_external_features(path: &Path, features: &Tensor<f32>, rate: f64) -> Result<()> {
    let [f, t_feat] = features.shape()[..] else {
        return Err(Error::shape("save_features", "features must be F×T"));
    };
    binio::write_f32(path, features.data())?;
    binio::write_json(
        &binio::sidecar(path),
        &FeatureSidecar {
            f,
            t_feat,
            feature_rate: rate,
        },
    )
}

/// Loads `<id>.bin` using the shape and rate in `<id>.json`.
pub fn load_external_features(path: &Path) -> Result<(Tensor<f32>, f64)> {
    let meta: FeatureSidecar = binio::read_json(&binio::sidecar(path))?;
    if !(meta.feature_rate > 0.0) {
        return Err(Error::format(path, "feature_rate must be positive"));
    }
    let data = binio::read_f32(path, meta.f * meta.t_feat)?;
    Ok((Tensor::from_vec(&[meta.f, meta.t_feat], data)?, meta.feature_rate))
}

/// Builds the learnable Mel encoder: the brain trunk without sensor
/// attention or subject layer, fed with `n_mels` bands.
pub fn deep_mel_net<R: Rng>(brain: &BrainNetConfig, n_mels: usize, rng: &mut R) -> Result<BrainNet<f32>> {
    BrainNet::new(brain.deep_mel(n_mels), "speech.", rng)
}

/// Runs the Deep Mel encoder on a `B×n_mels×T` batch.
pub fn deep_mel_forward<R: Rng>(
    net: &mut BrainNet<f32>,
    g: &mut Graph<f32>,
    vars: &[Var],
    mel: &Tensor<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let (b, _, _) = mel.dims3()?;
    let zeros = vec![0usize; b];
    let batch = BrainBatch {
        x: mel,
        subjects: &zeros,
        layout_of: &zeros,
        layouts: &[],
    };
    net.forward(g, vars, &batch, mode, rng)
}
