//! Loss and gradient of one preference pair under either training stage.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Graph, Packed, PairRows, TokenId, Transformer};
use crate::objectives::{lm_loss, lm_loss_grad, rank_loss_grad, LossBreakdown};
use crate::tensor::Real;

/// Which objective a pair contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Ranking loss (scaled by `rank_weight`) plus chosen-response language modeling.
    Pmp { rank_weight: f64 },
    /// Ranking loss only.
    RankOnly,
}

impl Objective {
    pub fn pmp() -> Self {
        Objective::Pmp { rank_weight: 1.0 }
    }

    fn rank_weight(&self) -> f64 {
        match self {
            Objective::Pmp { rank_weight } => *rank_weight,
            Objective::RankOnly => 1.0,
        }
    }
}

/// Token ids of one pair, ready to pack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl EncodedPair {
    pub fn pack(&self) -> (Packed, PairRows) {
        Packed::pair(&self.prompt, &self.chosen, &self.rejected)
    }

    pub fn total_tokens(&self) -> usize {
        self.prompt.len() + self.chosen.len() + self.rejected.len()
    }
}

fn split_targets(rows: &PairRows) -> (Vec<usize>, Vec<TokenId>) {
    rows.chosen_targets.iter().copied().unzip()
}

/// Forward-only evaluation of the pair loss.
pub fn pair_loss<T: Real>(model: &Transformer, params: &[T], pair: &EncodedPair, objective: Objective) -> Result<LossBreakdown> {
    let (packed, rows) = pair.pack();
    let trace = model.forward(params, &packed)?;
    let sc = model.reward(params, &trace, rows.chosen_last)?;
    let sr = model.reward(params, &trace, rows.rejected_last)?;
    let (rank, _) = rank_loss_grad(sc, sr);
    let rank = rank.to_f64_lossy();
    let lm = match objective {
        Objective::Pmp { .. } => {
            let (lm_rows, targets) = split_targets(&rows);
            let logits = model.logits(params, &trace, &lm_rows);
            let mask = vec![true; targets.len()];
            lm_loss(&logits, model.config().vocab_size, &targets, &mask)?.to_f64_lossy()
        }
        Objective::RankOnly => 0.0,
    };
    Ok(LossBreakdown {
        lm_loss: lm,
        rank_loss: rank,
        total: objective.rank_weight() * rank + lm,
    })
}

/// Pair loss plus its exact gradient with respect to every parameter.
pub fn pair_loss_grad<T: Real>(
    model: &Transformer,
    params: &[T],
    pair: &EncodedPair,
    objective: Objective,
    loss_scale: T,
) -> Result<(LossBreakdown, Vec<T>)> {
    let (packed, rows) = pair.pack();
    let mut graph = Graph::new(model, params);
    let node = graph.forward(&packed)?;
    let sc = graph.reward(node, rows.chosen_last)?;
    let sr = graph.reward(node, rows.rejected_last)?;
    let (rank, d_chosen) = rank_loss_grad(sc, sr);
    let w = T::from_f64_lossy(objective.rank_weight());
    graph.seed_reward(node, rows.chosen_last, loss_scale * w * d_chosen)?;
    graph.seed_reward(node, rows.rejected_last, -(loss_scale * w * d_chosen))?;

    let lm = match objective {
        Objective::Pmp { .. } => {
            let (lm_rows, targets) = split_targets(&rows);
            let logits = graph.logits(node, &lm_rows);
            let mask = vec![true; targets.len()];
            let (loss, mut dlogits) = lm_loss_grad(&logits, model.config().vocab_size, &targets, &mask)?;
            dlogits.iter_mut().for_each(|g| *g *= loss_scale);
            graph.seed_logits(node, &lm_rows, &dlogits);
            loss.to_f64_lossy()
        }
        Objective::RankOnly => 0.0,
    };
    let grads = graph.backward()?;
    let rank = rank.to_f64_lossy();
    Ok((
        LossBreakdown {
            lm_loss: lm,
            rank_loss: rank,
            total: objective.rank_weight() * rank + lm,
        },
        grads,
    ))
}
