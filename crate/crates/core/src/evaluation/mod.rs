//! Retrieval metrics over test-set probability matrices.

pub mod ridge;
mod run;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use run::{evaluate, score_split, EvalOutputs, ReportJson};

/// Test-set scores: a `trials × N` probability matrix over candidate
/// segments with the true column of each trial.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub probs: Vec<Vec<f64>>,
    pub truth: Vec<usize>,
    /// Anchor word of each candidate column.
    pub words: Vec<String>,
    /// Dataset subject id of each trial.
    pub subjects: Vec<usize>,
}

impl EvalReport {
    /// Softmaxes each row of logits in 64-bit.
    pub fn from_logits(logits: Vec<Vec<f64>>, truth: Vec<usize>, words: Vec<String>, subjects: Vec<usize>) -> Result<Self> {
        let probs = logits
            .into_iter()
            .map(|mut row| {
                crate::ops::softmax_in_place(&mut row);
                row
            })
            .collect();
        let r = EvalReport {
            probs,
            truth,
            words,
            subjects,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.words.len();
        if self.truth.len() != self.probs.len() || self.subjects.len() != self.probs.len() {
            return Err(Error::shape("eval_report", "one truth index and subject per trial"));
        }
        for (row, &t) in self.probs.iter().zip(&self.truth) {
            if row.len() != n || t >= n {
                return Err(Error::shape("eval_report", format!("row of {} for {n} candidates, truth {t}", row.len())));
            }
        }
        Ok(())
    }

    pub fn trials(&self) -> usize {
        self.probs.len()
    }

    pub fn candidates(&self) -> usize {
        self.words.len()
    }

    /// Keeps only the listed trials.
    pub fn subset(&self, trials: &[usize]) -> EvalReport {
        EvalReport {
            probs: trials.iter().map(|&i| self.probs[i].clone()).collect(),
            truth: trials.iter().map(|&i| self.truth[i]).collect(),
            words: self.words.clone(),
            subjects: trials.iter().map(|&i| self.subjects[i]).collect(),
        }
    }
}

/// Zero-based rank of entry `t`; ties go to the lower index.
pub fn rank_of(row: &[f64], t: usize) -> usize {
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > row[t] || (v == row[t] && j < t))
        .count()
}

fn has_tie(row: &[f64], t: usize) -> bool {
    row.iter().enumerate().any(|(j, &v)| j != t && v == row[t])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TopK {
    pub k: usize,
    /// Percentage in [0, 100].
    pub accuracy: f64,
    /// Trials whose true probability tied with another candidate.
    pub ties: usize,
}

pub fn topk_accuracy(probs: &[Vec<f64>], truth: &[usize], k: usize) -> TopK {
    let mut hits = 0;
    let mut ties = 0;
    for (row, &t) in probs.iter().zip(truth) {
        hits += usize::from(rank_of(row, t) < k);
        ties += usize::from(has_tie(row, t));
    }
    TopK {
        k,
        accuracy: if probs.is_empty() {
            0.0
        } else {
            100.0 * hits as f64 / probs.len() as f64
        },
        ties,
    }
}

/// Candidate probabilities summed within identical anchor words.
#[derive(Clone, Debug)]
pub struct WordEval {
    /// Sorted vocabulary of the candidate set.
    pub vocab: Vec<String>,
    /// `trials × vocab` word probabilities.
    pub probs: Vec<Vec<f64>>,
    /// True word index per trial.
    pub truth: Vec<usize>,
}

impl WordEval {
    pub fn topk(&self, k: usize) -> TopK {
        topk_accuracy(&self.probs, &self.truth, k)
    }

    pub fn true_word_prob(&self, trial: usize) -> f64 {
        self.probs[trial][self.truth[trial]]
    }
}

pub fn word_level_eval(report: &EvalReport) -> Result<WordEval> {
    if let Some(i) = report.words.iter().position(String::is_empty) {
        return Err(Error::invalid("report", format!("candidate {i} has no anchor word")));
    }
    let vocab: Vec<String> = report.words.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let col_word: Vec<usize> = report.words.iter().map(|w| index[w.as_str()]).collect();
    let probs = report
        .probs
        .iter()
        .map(|row| {
            let mut out = vec![0.0; vocab.len()];
            for (p, &w) in row.iter().zip(&col_word) {
                out[w] += p;
            }
            out
        })
        .collect();
    let truth = report.truth.iter().map(|&t| col_word[t]).collect();
    Ok(WordEval { vocab, probs, truth })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Restricted {
    pub n: usize,
    pub seed: u64,
    pub topk: Vec<TopK>,
}

/// Per trial, the true candidate plus `n − 1` seeded random distractors,
/// renormalised; candidates keep their original order.
pub fn restricted_candidates(probs: &[Vec<f64>], truth: &[usize], n: usize, seed: u64, ks: &[usize]) -> Result<Restricted> {
    if n < 2 {
        return Err(Error::invalid("n", "restricted evaluation needs at least two candidates"));
    }
    let mut sub_probs = Vec::with_capacity(probs.len());
    let mut sub_truth = Vec::with_capacity(probs.len());
    for (trial, (row, &t)) in probs.iter().zip(truth).enumerate() {
        if n > row.len() {
            return Err(Error::invalid("n", format!("{n} candidates requested, only {} exist", row.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut keep: Vec<usize> = sample(&mut rng, row.len() - 1, n - 1)
            .into_iter()
            .map(|j| if j >= t { j + 1 } else { j })
            .collect();
        keep.push(t);
        keep.sort_unstable();
        let total: f64 = keep.iter().map(|&j| row[j]).sum();
        sub_probs.push(keep.iter().map(|&j| row[j] / total).collect::<Vec<_>>());
        sub_truth.push(keep.binary_search(&t).unwrap());
    }
    Ok(Restricted {
        n,
        seed,
        topk: ks.iter().map(|&k| topk_accuracy(&sub_probs, &sub_truth, k)).collect(),
    })
}

/// Word-level accuracy split by whether the true word occurs in training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShot {
    pub k: usize,
    /// `None` when the subset is empty (not applicable).
    pub in_train: Option<f64>,
    pub not_in_train: Option<f64>,
    pub n_in_train: usize,
    pub n_not_in_train: usize,
}

pub fn zero_shot_split(words: &WordEval, train_vocab: &BTreeSet<String>, k: usize) -> ZeroShot {
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (i, &t) in words.truth.iter().enumerate() {
        if train_vocab.contains(&words.vocab[t]) {
            inside.push(i);
        } else {
            outside.push(i);
        }
    }
    let acc = |idx: &[usize]| {
        (!idx.is_empty()).then(|| {
            let p: Vec<Vec<f64>> = idx.iter().map(|&i| words.probs[i].clone()).collect();
            let t: Vec<usize> = idx.iter().map(|&i| words.truth[i]).collect();
            topk_accuracy(&p, &t, k).accuracy
        })
    };
    ZeroShot {
        k,
        in_train: acc(&inside),
        not_in_train: acc(&outside),
        n_in_train: inside.len(),
        n_not_in_train: outside.len(),
    }
}

/// Probability-weighted average of candidate spectrograms.
pub fn mel_reconstruction(probs: &[f64], mels: &[Tensor<f32>]) -> Result<Tensor<f64>> {
    if probs.len() != mels.len() || mels.is_empty() {
        return Err(Error::invalid(
            "mels",
            format!("{} probabilities for {} candidate spectrograms", probs.len(), mels.len()),
        ));
    }
    let shape = mels[0].shape().to_vec();
    let mut out = Tensor::<f64>::zeros(&shape);
    for (p, m) in probs.iter().zip(mels) {
        if m.shape() != shape.as_slice() {
            return Err(Error::shape("mel_reconstruction", "candidate spectrograms differ in shape"));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += p * v as f64;
        }
    }
    Ok(out)
}

/// Accuracy of one subject's trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectScore {
    pub subject: usize,
    pub trials: usize,
    pub top1: f64,
    pub top10: f64,
    pub word_top10: f64,
}

pub fn per_subject(report: &EvalReport, words: &WordEval) -> Vec<SubjectScore> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in report.subjects.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(subject, idx)| {
            let sub = report.subset(&idx);
            let wp: Vec<Vec<f64>> = idx.iter().map(|&i| words.probs[i].clone()).collect();
            let wt: Vec<usize> = idx.iter().map(|&i| words.truth[i]).collect();
            SubjectScore {
                subject,
                trials: idx.len(),
                top1: topk_accuracy(&sub.probs, &sub.truth, 1).accuracy,
                top10: topk_accuracy(&sub.probs, &sub.truth, 10).accuracy,
                word_top10: topk_accuracy(&wp, &wt, 10).accuracy,
            }
        })
        .collect()
}

/// Isolated-word protocol: the model must have been trained on the short
/// −0.3 s to +0.5 s windows; scoring is otherwise identical, with the
/// vocabulary-restricted variant using the restricted-candidate path.
pub fn isolated_word_eval(report: &EvalReport, window_s: f64, restricted_n: usize, seed: u64) -> Result<(TopK, TopK, Restricted)> {
    if (window_s - 0.8).abs() > 1e-9 {
        return Err(Error::invalid(
            "window",
            format!("isolated-word evaluation needs a 0.8 s model, this one uses {window_s} s windows"),
        ));
    }
    let words = word_level_eval(report)?;
    let n = restricted_n.min(words.vocab.len());
    Ok((words.topk(1), words.topk(10), restricted_candidates(&words.probs, &words.truth, n, seed, &[1, 10])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn report(probs: Vec<Vec<f64>>, truth: Vec<usize>, words: &[&str]) -> EvalReport {
        let subjects = vec![0; truth.len()];
        EvalReport {
            probs,
            truth,
            words: words.iter().map(|w| w.to_string()).collect(),
            subjects,
        }
    }

    #[test]
    fn perfect_decoder_scores_full_marks() {
        let probs: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if i == j { 0.9 } else { 0.025 }).collect()).collect();
        let truth: Vec<usize> = (0..5).collect();
        for k in [1, 5] {
            assert_eq!(topk_accuracy(&probs, &truth, k).accuracy, 100.0);
        }
        let r = restricted_candidates(&probs, &truth, 2, 0, &[1]).unwrap();
        assert_eq!(r.topk[0].accuracy, 100.0);
    }

    #[test]
    fn ties_go_to_lower_index_and_are_counted() {
        let probs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let t = topk_accuracy(&probs, &[0, 1], 1);
        assert_eq!(t.accuracy, 50.0);
        assert_eq!(t.ties, 2);
    }

    #[test]
    fn word_grouping_sums() {
        let r = report(vec![vec![0.2, 0.3, 0.5]], vec![0], &["thank", "thank", "you"]);
        let w = word_level_eval(&r).unwrap();
        assert_eq!(w.vocab, vec!["thank", "you"]);
        assert_eq!(w.probs[0], vec![0.5, 0.5]);
        assert_eq!(w.truth, vec![0]);
        let r = report(vec![vec![0.2]], vec![0], &[""]);
        assert!(word_level_eval(&r).is_err());
    }

    #[test]
    fn distinct_words_match_segment_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let mut row: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        let truth: Vec<usize> = (0..20).map(|i| i % 6).collect();
        let r = report(probs, truth, &["a", "b", "c", "d", "e", "f"]);
        let w = word_level_eval(&r).unwrap();
        for k in [1, 3] {
            assert_eq!(w.topk(k), topk_accuracy(&r.probs, &r.truth, k));
        }
    }

    #[test]
    fn full_restriction_is_identity() {
        let probs = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.2, 0.3]];
        let r = restricted_candidates(&probs, &[2, 2], 3, 9, &[1, 2]).unwrap();
        assert_eq!(r.topk[0], topk_accuracy(&probs, &[2, 2], 1));
        assert_eq!(r.topk[1], topk_accuracy(&probs, &[2, 2], 2));
        assert!(restricted_candidates(&probs, &[2, 2], 1, 9, &[1]).is_err());
    }

    #[test]
    fn zero_shot_marks_empty_subset() {
        let r = report(vec![vec![0.7, 0.3]], vec![0], &["a", "b"]);
        let w = word_level_eval(&r).unwrap();
        let vocab: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        let z = zero_shot_split(&w, &vocab, 1);
        assert_eq!(z.in_train, Some(100.0));
        assert_eq!(z.not_in_train, None);
        assert_eq!(z.n_not_in_train, 0);
    }

    #[test]
    fn reconstruction_mixtures() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![3.0f32, 6.0]).unwrap();
        let one_hot = mel_reconstruction(&[0.0, 1.0], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(one_hot.data(), &[3.0, 6.0]);
        let uniform = mel_reconstruction(&[0.5, 0.5], &[a.clone(), b]).unwrap();
        assert_eq!(uniform.data(), &[2.0, 4.0]);
        assert!(mel_reconstruction(&[1.0], &[]).is_err());
    }

    #[test]
    fn isolated_words_need_short_windows() {
        let r = report(vec![vec![0.7, 0.3]], vec![0], &["a", "b"]);
        assert!(isolated_word_eval(&r, 3.0, 50, 0).is_err());
        let (t1, _, restricted) = isolated_word_eval(&r, 0.8, 50, 0).unwrap();
        assert_eq!(t1.accuracy, 100.0);
        assert_eq!(restricted.n, 2);
    }

    #[test]
    fn from_logits_rows_sum_to_one() {
        let r = EvalReport::from_logits(vec![vec![1000.0, 0.0, -5.0], vec![1.0, 2.0, 3.0]], vec![0, 2], vec!["a".into(), "b".into(), "c".into()], vec![0, 1]).unwrap();
        for row in &r.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(EvalReport::from_logits(vec![vec![1.0]], vec![3], vec!["a".into()], vec![0]).is_err());
    }
}
