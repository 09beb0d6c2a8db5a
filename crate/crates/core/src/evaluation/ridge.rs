//! Ridge regression from linguistic features to the decoder's true-word
//! probability, scored by cross-validated Pearson correlation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_FOLDS: usize = 5;

/// Solves `(XᵀX + αI) w = Xᵀy` for row-major `x` (`n×d`). No intercept,
/// no standardisation.
pub fn ridge_solve(x: &[f64], n: usize, d: usize, y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if x.len() != n * d || y.len() != n {
        return Err(Error::shape("ridge_solve", format!("x has {} values for {n}×{d}, y has {}", x.len(), y.len())));
    }
    let xm = DMatrix::from_row_slice(n, d, x);
    let yv = DVector::from_column_slice(y);
    let mut a = xm.transpose() * &xm;
    for i in 0..d {
        a[(i, i)] += alpha;
    }
    let rhs = xm.transpose() * yv;
    let w = match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        // only reachable with α = 0 and collinear features
        None => a
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::invalid("features", e.to_string()))?,
    };
    Ok(w.iter().copied().collect())
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionScore {
    /// Mean held-out Pearson R over folds.
    pub r: f64,
    pub fold_r: Vec<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionAnalysis {
    pub overall: PredictionScore,
    /// Per subject id, when subject labels are given.
    pub per_subject: BTreeMap<usize, PredictionScore>,
    /// Unweighted mean and standard error of the per-subject R.
    pub subject_mean: Option<f64>,
    pub subject_sem: Option<f64>,
}

/// Contiguous k-fold cross-validated ridge. Features are standardised and
/// the target centred with training-fold statistics; the intercept is the
/// training mean.
pub fn cross_validated_r(x: &[f64], n: usize, d: usize, y: &[f64], alpha: f64, folds: usize) -> Result<PredictionScore> {
    if x.len() != n * d || y.len() != n {
        return Err(Error::shape(
            "prediction_analysis",
            format!("{n} targets but the feature table has {} values for {d} columns", x.len()),
        ));
    }
    if folds < 2 || n < folds {
        return Err(Error::invalid("folds", format!("{folds} folds over {n} trials")));
    }
    let mut fold_r = Vec::with_capacity(folds);
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let train: Vec<usize> = (0..n).filter(|&i| i < lo || i >= hi).collect();
        let nt = train.len() as f64;
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for &i in &train {
            for j in 0..d {
                mean[j] += x[i * d + j] / nt;
            }
        }
        for &i in &train {
            for j in 0..d {
                sd[j] += (x[i * d + j] - mean[j]).powi(2) / nt;
            }
        }
        let sd: Vec<f64> = sd.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        let (mean, sd) = (&mean, &sd);
        let std_row = |i: usize| (0..d).map(move |j| (x[i * d + j] - mean[j]) / sd[j]);
        let y_mean = train.iter().map(|&i| y[i]).sum::<f64>() / nt;
        let xt: Vec<f64> = train.iter().flat_map(|&i| std_row(i)).collect();
        let yt: Vec<f64> = train.iter().map(|&i| y[i] - y_mean).collect();
        let w = ridge_solve(&xt, train.len(), d, &yt, alpha)?;
        let pred: Vec<f64> = (lo..hi)
            .map(|i| y_mean + std_row(i).zip(&w).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        fold_r.push(pearson(&pred, &y[lo..hi]));
    }
    Ok(PredictionScore {
        r: fold_r.iter().sum::<f64>() / folds as f64,
        fold_r,
        n,
    })
}

/// Mean and standard error (sample sd / √n) of a list of scores.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn prediction_analysis(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    subjects: Option<&[usize]>,
    alpha: f64,
    folds: usize,
) -> Result<PredictionAnalysis> {
    let overall = cross_validated_r(x, n, d, y, alpha, folds)?;
    let mut per_subject = BTreeMap::new();
    if let Some(subjects) = subjects {
        if subjects.len() != n {
            return Err(Error::shape("prediction_analysis", "one subject label per trial"));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &s) in subjects.iter().enumerate() {
            groups.entry(s).or_default().push(i);
        }
        for (s, rows) in groups {
            if rows.len() < folds {
                continue;
            }
            let xs: Vec<f64> = rows.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
            let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            per_subject.insert(s, cross_validated_r(&xs, rows.len(), d, &ys, alpha, folds)?);
        }
    }
    let rs: Vec<f64> = per_subject.values().map(|p| p.r).collect();
    let (subject_mean, subject_sem) = if rs.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sem(&rs);
        (Some(m), Some(s))
    };
    Ok(PredictionAnalysis {
        overall,
        per_subject,
        subject_mean,
        subject_sem,
    })
}
