//! Contrastive (CLIP-style) and regression objectives.
//!
//! The contrastive score of a candidate is the plain inner product over both
//! feature and time axes. There is no temperature and no re-normalisation,
//! and the loss only runs brain → speech.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{log_sum_exp, softmax_in_place};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Clip,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateOrigin {
    BatchNegatives,
    TestSet,
}

/// Candidate targets for one trial.
#[derive(Clone, Debug)]
pub struct CandidateSet<'a, T> {
    pub candidates: Vec<&'a Tensor<T>>,
    pub positive: usize,
    pub origin: CandidateOrigin,
}

impl<'a, T: Real> CandidateSet<'a, T> {
    pub fn new(candidates: Vec<&'a Tensor<T>>, positive: usize, origin: CandidateOrigin) -> Result<Self> {
        if candidates.len() < 2 {
            return Err(Error::invalid("candidates", "need at least two candidates"));
        }
        if positive >= candidates.len() {
            return Err(Error::invalid("positive", format!("index {positive} out of range")));
        }
        let shape = candidates[0].shape();
        if candidates.iter().any(|c| c.shape() != shape) {
            return Err(Error::shape("candidate_set", "candidates differ in shape"));
        }
        Ok(CandidateSet {
            candidates,
            positive,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Score of every candidate: `⟨Z, Ȳ_j⟩` summed over all elements.
pub fn clip_logits<T: Real>(z: &Tensor<T>, set: &CandidateSet<'_, T>) -> Result<Vec<T>> {
    set.candidates
        .iter()
        .map(|y| {
            if y.shape() != z.shape() {
                return Err(Error::shape(
                    "clip_logits",
                    format!("prediction {:?} vs candidate {:?}", z.shape(), y.shape()),
                ));
            }
            Ok(z.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum())
        })
        .collect()
}

/// `−score_pos + log Σ_j exp(score_j)`.
pub fn clip_loss<T: Real>(logits: &[T], positive: usize) -> Result<T> {
    if positive >= logits.len() {
        return Err(Error::invalid("positive", format!("index {positive} out of range")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            location: "contrastive logits".into(),
        });
    }
    Ok(log_sum_exp(logits) - logits[positive])
}

/// Softmax over candidate scores.
pub fn probabilities<T: Real>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Mean squared error between two equally shaped tensors.
pub fn regression_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "regression_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = T::of(pred.len() as f64);
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        / n)
}

/// For every batch item, the whole batch's targets with the item's own
/// target as the positive. Duplicates are kept.
pub fn batch_negatives<T: Real>(targets: &[Tensor<T>]) -> Result<Vec<CandidateSet<'_, T>>> {
    if targets.len() < 2 {
        return Err(Error::invalid("batch", "batch negatives need a batch of at least two"));
    }
    let all: Vec<&Tensor<T>> = targets.iter().collect();
    (0..targets.len())
        .map(|i| CandidateSet::new(all.clone(), i, CandidateOrigin::BatchNegatives))
        .collect()
}

impl<T: Real> Graph<T> {
    /// Batch contrastive loss: `z, y: B×F×T`, the `B×B` logit matrix is
    /// computed once and row `i` has positive `i`.
    pub fn clip_loss_batch(&mut self, z: Var, y: Var) -> Result<Var> {
        let b = self.value(z).shape().first().copied().unwrap_or(0);
        if b < 2 {
            return Err(Error::invalid("batch", "batch negatives need a batch of at least two"));
        }
        let logits = self.pairwise_inner(z, y)?;
        let targets: Vec<usize> = (0..b).collect();
        self.cross_entropy_rows(logits, &targets)
    }

    pub fn objective_loss(&mut self, objective: Objective, z: Var, y: Var) -> Result<Var> {
        match objective {
            Objective::Clip => self.clip_loss_batch(z, y),
            Objective::Regression => self.mse(z, y),
        }
    }
}
