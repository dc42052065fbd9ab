//! Distillation losses: cross-alignment and self-alignment KL terms,
//! supervised softmax cross-entropy, and their weighted total.
//!
//! Both KL terms run teacher-to-student: the teacher distribution multiplies
//! the log-ratio. Cross-alignment compares entity-level candidate
//! distributions with *both* models read at the teacher's argmax view per
//! candidate; self-alignment compares the view-level distribution inside
//! each candidate and sums over all candidates.

use serde::{Deserialize, Serialize};

use crate::error::{MvdError, Result};
use crate::numeric::{log_softmax, logsumexp};
use crate::scoring::ScoreMatrix;

/// A categorical distribution stored with both probabilities and
/// log-probabilities for numerical stability.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Distribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Max-subtracted softmax over raw scores.
pub fn softmax(scores: &[f64]) -> Result<Distribution> {
    if scores.is_empty() {
        return Err(MvdError::Validation("softmax of an empty list".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MvdError::NonFinite {
            what: format!("softmax input[{i}]"),
        });
    }
    let log_probs = log_softmax(scores);
    let probs: Vec<f64> = log_probs.iter().map(|&l| l.exp()).collect();
    Ok(Distribution { probs, log_probs })
}

/// `KL(p || q) = sum_i p_i (log p_i - log q_i)`; terms with `p_i = 0`
/// contribute nothing.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MvdError::DimMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.probs
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .map(|(&pi, (&lp, &lq))| if pi == 0.0 { 0.0 } else { pi * (lp - lq) })
        .sum())
}

/// Loss weights for the two distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(MvdError::Validation(format!(
                "loss weights must be finite and >= 0: alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn teacher_parts(sm: &ScoreMatrix) -> Result<(&Vec<Vec<f64>>, &Vec<usize>)> {
    match (&sm.teacher, &sm.i_ce) {
        (Some(grid), Some(i_ce)) => Ok((grid, i_ce)),
        _ => Err(MvdError::Validation(
            "score matrix lacks a teacher grid".into(),
        )),
    }
}

/// Entity-level alignment: softmax over candidates of each model's score at
/// the *teacher's* argmax view, then `KL(teacher || student)`. A single
/// candidate is a point mass for both models, so the loss is 0 by
/// convention.
pub fn cross_alignment_loss(sm: &ScoreMatrix) -> Result<f64> {
    let (grid, i_ce) = teacher_parts(sm)?;
    let k = grid.len();
    if k < 2 {
        return Ok(0.0);
    }
    let teacher_scores: Vec<f64> = (0..k).map(|j| grid[j][i_ce[j]]).collect();
    let student_scores: Vec<f64> = (0..k).map(|j| sm.student[j][i_ce[j]]).collect();
    kl_divergence(&softmax(&teacher_scores)?, &softmax(&student_scores)?)
}

/// View-level alignment inside each candidate, summed over all candidates.
/// Candidates with a single view contribute 0.
pub fn self_alignment_loss(sm: &ScoreMatrix) -> Result<f64> {
    let (grid, _) = teacher_parts(sm)?;
    let mut total = 0.0;
    for (ci, t_row) in grid.iter().enumerate() {
        let s_row = &sm.student[ci][..t_row.len()];
        total += kl_divergence(&softmax(t_row)?, &softmax(s_row)?)?;
    }
    Ok(total)
}

/// Softmax cross-entropy against the gold index:
/// `-s_gold + log sum_j exp(s_j)`.
pub fn supervised_loss(entity_scores: &[f64], gold_index: usize) -> Result<f64> {
    if gold_index >= entity_scores.len() {
        return Err(MvdError::Validation(format!(
            "gold index {gold_index} out of range for {} candidates",
            entity_scores.len()
        )));
    }
    Ok(logsumexp(entity_scores) - entity_scores[gold_index])
}

/// Per-term loss values; `total` applies the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub de: f64,
    pub ce: f64,
    pub cross: f64,
    pub self_align: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(de: f64, ce: f64, cross: f64, self_align: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            de,
            ce,
            cross,
            self_align,
            total: de + ce + w.alpha * cross + w.beta * self_align,
        }
    }
}

/// The weighted training objective with its per-term breakdown.
pub fn total_loss(sm: &ScoreMatrix, gold_index: usize, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let entity_ce = sm
        .entity_ce
        .as_ref()
        .ok_or_else(|| MvdError::Validation("score matrix lacks teacher entity scores".into()))?;
    let de = supervised_loss(&sm.entity_de, gold_index)?;
    let ce = supervised_loss(entity_ce, gold_index)?;
    let cross = cross_alignment_loss(sm)?;
    let self_align = self_alignment_loss(sm)?;
    Ok(LossBreakdown::compose(de, ce, cross, self_align, w))
}
