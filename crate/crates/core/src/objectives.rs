//! Training objectives: next-token negative log-likelihood restricted to
//! response tokens, the pairwise ranking loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub lm_loss: f64,
    pub rank_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.lm_loss.is_finite() && self.rank_loss.is_finite() && self.total.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    pub chosen: f64,
    pub rejected: f64,
}

impl PairScores {
    pub fn new(chosen: f64, rejected: f64) -> Self {
        Self { chosen, rejected }
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-log sigmoid(chosen - rejected)`.
pub fn rank_loss(scores: PairScores) -> Result<f64> {
    if !scores.chosen.is_finite() || !scores.rejected.is_finite() {
        return Err(Error::Input(format!("non-finite pair scores {scores:?}")));
    }
    Ok(softplus(scores.rejected - scores.chosen))
}

/// Ranking loss and its derivative with respect to the chosen score; the
/// derivative with respect to the rejected score is the negation.
pub fn rank_loss_grad<T: Real>(chosen: T, rejected: T) -> (T, T) {
    let margin = chosen - rejected;
    (softplus(-margin), -sigmoid(-margin))
}

fn check_lm_inputs<T>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<usize> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(Error::Input(format!(
            "logits length {} does not match {} targets x vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    if mask.len() != targets.len() {
        return Err(Error::Input("mask length differs from target length".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Input(format!("target {t} outside vocab {vocab}")));
    }
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::Input("response mask selects no positions".into()));
    }
    Ok(selected)
}

fn log_softmax_at<T: Real>(row: &[T], target: usize) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    (row[target] - lse, lse)
}

/// Mean next-token negative log-likelihood over the masked rows.
///
/// Row `t` of `logits` (`[targets.len() x vocab]`) predicts `targets[t]`.
pub fn lm_loss<T: Real>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<T> {
    let selected = check_lm_inputs(logits, vocab, targets, mask)?;
    let mut total = T::zero();
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let (logp, _) = log_softmax_at(&logits[t * vocab..(t + 1) * vocab], target as usize);
            total -= logp;
        }
    }
    Ok(total / T::from_usize(selected).unwrap())
}

/// [`lm_loss`] plus its gradient with respect to `logits`.
pub fn lm_loss_grad<T: Real>(logits: &[T], vocab: usize, targets: &[TokenId], mask: &[bool]) -> Result<(T, Vec<T>)> {
    let selected = check_lm_inputs(logits, vocab, targets, mask)?;
    let inv = T::one() / T::from_usize(selected).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let (logp, lse) = log_softmax_at(row, target as usize);
        total -= logp;
        let g = &mut grad[t * vocab..(t + 1) * vocab];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - lse).exp() * inv;
        }
        g[target as usize] -= inv;
    }
    Ok((total * inv, grad))
}

/// Components of the pretraining objective for one pair.
#[derive(Clone, Debug)]
pub struct PairForward<'a, T> {
    /// Logits on the rows that predict chosen response tokens.
    pub chosen_logits: &'a [T],
    pub chosen_targets: &'a [TokenId],
    pub vocab: usize,
    pub s_chosen: T,
    pub s_rejected: T,
}

/// `total = rank_weight * rank_loss + lm_loss`, with the LM term over chosen
/// response tokens only.
pub fn pmp_loss<T: Real>(fwd: &PairForward<'_, T>, rank_weight: f64) -> Result<LossBreakdown> {
    let mask = vec![true; fwd.chosen_targets.len()];
    let lm = lm_loss(fwd.chosen_logits, fwd.vocab, fwd.chosen_targets, &mask)?.to_f64_lossy();
    let rank = rank_loss(PairScores::new(fwd.s_chosen.to_f64_lossy(), fwd.s_rejected.to_f64_lossy()))?;
    Ok(LossBreakdown {
        lm_loss: lm,
        rank_loss: rank,
        total: rank_weight * rank + lm,
    })
}
