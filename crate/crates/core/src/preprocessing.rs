//! Brain-signal conditioning: resampling to the working rate, per-window
//! baseline correction, per-recording robust scaling and clamping.
//!
//! Signals are `C×T` row-major `f32` buffers wrapped in [`Tensor`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WORKING_RATE: f64 = 120.0;

/// Kaiser-windowed sinc resampler for downsampling by a rational factor.
///
/// The low-pass cutoff sits at 90 % of the output Nyquist frequency with a
/// transition band of ±10 %, so content at or above the output Nyquist is
/// attenuated by at least the design attenuation.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    half_width: usize,
    cutoff: f64,
    beta: f64,
    phases: HashMap<usize, Vec<f64>>,
}

const STOPBAND_DB: f64 = 80.0;
const MAX_PRECOMPUTED_PHASES: usize = 4096;

fn rational(sr_in: f64, sr_out: f64) -> (usize, usize) {
    let a = (sr_in * 1000.0).round() as u64;
    let b = (sr_out * 1000.0).round() as u64;
    let g = gcd(a, b);
    ((b / g) as usize, (a / g) as usize)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

impl Resampler {
    pub fn new(sr_in: f64, sr_out: f64) -> Result<Self> {
        if !(sr_out > 0.0) || !sr_in.is_finite() {
            return Err(Error::invalid("sample_rate", "rates must be positive and finite"));
        }
        if sr_in < sr_out {
            return Err(Error::invalid(
                "sample_rate",
                format!("upsampling from {sr_in} Hz to {sr_out} Hz is not supported"),
            ));
        }
        let (up, down) = rational(sr_in, sr_out);
        let ratio = sr_out / sr_in;
        // cutoff and transition in cycles per input sample
        let nyquist = 0.5 * ratio;
        let cutoff = 0.9 * nyquist;
        let transition = 0.2 * nyquist;
        let beta = 0.1102 * (STOPBAND_DB - 8.7);
        let taps = (STOPBAND_DB - 8.0) / (2.285 * 2.0 * std::f64::consts::PI * transition);
        let half_width = (taps / 2.0).ceil() as usize + 1;
        let mut r = Resampler {
            up,
            down,
            half_width,
            cutoff,
            beta,
            phases: HashMap::new(),
        };
        if up <= MAX_PRECOMPUTED_PHASES {
            for p in 0..up {
                let taps = r.taps(p as f64 / up as f64);
                r.phases.insert(p, taps);
            }
        }
        Ok(r)
    }

    /// Normalised filter taps for a fractional offset `frac ∈ [0, 1)`;
    /// tap `i` weighs input sample `base + i − half_width + 1`.
    fn taps(&self, frac: f64) -> Vec<f64> {
        let hw = self.half_width as isize;
        let i0 = bessel_i0(self.beta);
        let mut taps: Vec<f64> = (-hw + 1..=hw)
            .map(|j| {
                let tau = frac - j as f64;
                let x = 2.0 * self.cutoff * tau;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                let r = tau / self.half_width as f64;
                let w = if r.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(self.beta * (1.0 - r * r).sqrt()) / i0
                };
                2.0 * self.cutoff * sinc * w
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        taps
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len as f64 * self.up as f64 / self.down as f64).round() as usize
    }

    /// Resamples one channel, holding the edge samples beyond the ends.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let n_out = self.output_len(x.len());
        let last = x.len() as isize - 1;
        let hw = self.half_width as isize;
        let mut out = Vec::with_capacity(n_out);
        for n in 0..n_out {
            let num = n * self.down;
            let base = (num / self.up) as isize;
            let phase = num % self.up;
            let owned;
            let taps = match self.phases.get(&phase) {
                Some(t) => t,
                None => {
                    owned = self.taps(phase as f64 / self.up as f64);
                    &owned
                }
            };
            let mut acc = 0.0;
            for (i, &h) in taps.iter().enumerate() {
                let k = (base + i as isize - hw + 1).clamp(0, last);
                acc += h * x[k as usize];
            }
            out.push(acc);
        }
        out
    }
}

/// Resamples every channel of a `C×T` signal from `sr_in` to `sr_out`.
pub fn resample(signal: &Tensor<f32>, sr_in: f64, sr_out: f64) -> Result<Tensor<f32>> {
    let [c, t] = signal.shape()[..] else {
        return Err(Error::shape("resample", "signal must be C×T"));
    };
    let rs = Resampler::new(sr_in, sr_out)?;
    if sr_in == sr_out {
        return Ok(signal.clone());
    }
    let t_out = rs.output_len(t);
    let mut out = Vec::with_capacity(c * t_out);
    for ch in 0..c {
        let row: Vec<f64> = signal.data()[ch * t..(ch + 1) * t].iter().map(|&v| v as f64).collect();
        out.extend(rs.process(&row).into_iter().map(|v| v as f32));
    }
    Tensor::from_vec(&[c, t_out], out)
}

/// Subtracts from each channel its mean over the first `baseline` samples.
pub fn baseline_correct(window: &mut Tensor<f32>, baseline: usize) -> Result<()> {
    let [c, t] = window.shape()[..] else {
        return Err(Error::shape("baseline_correct", "window must be C×T"));
    };
    if baseline == 0 || baseline > t {
        return Err(Error::shape(
            "baseline_correct",
            format!("baseline of {baseline} samples does not fit a window of {t}"),
        ));
    }
    let data = window.data_mut();
    for ch in 0..c {
        let row = &mut data[ch * t..(ch + 1) * t];
        let mean = row[..baseline].iter().map(|&v| v as f64).sum::<f64>() / baseline as f64;
        row.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
    }
    Ok(())
}

/// Linear-interpolation quantile (order statistic at `q · (n − 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-channel quartiles of the data a recording's scaler was fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub q25: Vec<f64>,
    pub median: Vec<f64>,
    pub q75: Vec<f64>,
}

impl ScalerParams {
    /// Fits on a set of `C×T` chunks (typically the training windows of one
    /// recording). Rejects channels with zero inter-quartile range.
    pub fn fit<'a>(chunks: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for chunk in chunks {
            let [c, t] = chunk.shape()[..] else {
                return Err(Error::shape("scaler_fit", "chunks must be C×T"));
            };
            if columns.is_empty() {
                columns = vec![Vec::new(); c];
            } else if columns.len() != c {
                return Err(Error::shape("scaler_fit", "chunks differ in channel count"));
            }
            for (ch, col) in columns.iter_mut().enumerate() {
                col.extend(chunk.data()[ch * t..(ch + 1) * t].iter().map(|&v| v as f64));
            }
        }
        if columns.is_empty() || columns[0].is_empty() {
            return Err(Error::invalid("chunks", "no data to fit the scaler on"));
        }
        let mut p = ScalerParams {
            q25: Vec::new(),
            median: Vec::new(),
            q75: Vec::new(),
        };
        for (ch, mut col) in columns.into_iter().enumerate() {
            col.sort_by(|a, b| a.total_cmp(b));
            let (a, m, b) = (
                quantile_sorted(&col, 0.25),
                quantile_sorted(&col, 0.5),
                quantile_sorted(&col, 0.75),
            );
            if !(b > a) {
                return Err(Error::DegenerateChannel {
                    channel: ch,
                    reason: format!("inter-quartile range is zero (q25 = q75 = {a})"),
                });
            }
            p.q25.push(a);
            p.median.push(m);
            p.q75.push(b);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.q25.len()
    }

    #[inline]
    pub fn apply_value(&self, ch: usize, x: f64) -> f64 {
        (2.0 * x - self.q25[ch] - self.q75[ch]) / (self.q75[ch] - self.q25[ch])
    }
}

/// Maps each channel so that its q25 lands on −1 and its q75 on +1.
pub fn robust_scale(signal: &mut Tensor<f32>, params: &ScalerParams) -> Result<()> {
    let [c, t] = signal.shape()[..] else {
        return Err(Error::shape("robust_scale", "signal must be C×T"));
    };
    if params.channels() != c {
        return Err(Error::shape(
            "robust_scale",
            format!("scaler fitted on {} channels, signal has {c}", params.channels()),
        ));
    }
    for ch in 0..c {
        if !(params.q75[ch] > params.q25[ch]) {
            return Err(Error::DegenerateChannel {
                channel: ch,
                reason: "q75 ≤ q25".into(),
            });
        }
    }
    let data = signal.data_mut();
    for ch in 0..c {
        for v in &mut data[ch * t..(ch + 1) * t] {
            *v = params.apply_value(ch, *v as f64) as f32;
        }
    }
    Ok(())
}

/// Saturates values to `[−limit, limit]`; `None` disables clamping.
pub fn clamp(values: &mut [f32], limit: Option<f32>) {
    if let Some(l) = limit {
        values.iter_mut().for_each(|v| *v = v.clamp(-l, l));
    }
}
