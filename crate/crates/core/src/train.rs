//! Pretraining and reward finetuning loops.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{file_digest, load_checkpoint};
use crate::config::{Init, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::{pairwise_accuracy, RewardModel};
use crate::model::ModelState;
use crate::objectives::LossBreakdown;
use crate::optim::{apply_step, clip_grad_norm, OptimState};
use crate::pairgen::PairRecord;
use crate::seed;
use crate::step::{pair_loss_grad, EncodedPair, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Where a run's starting weights came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// `"random"` or the checkpoint path.
    pub init: String,
    /// SHA-256 of the initial checkpoint file.
    pub init_digest: Option<String>,
    /// Every run starts from `init`; nothing is carried over from earlier points.
    pub fresh: bool,
}

impl Lineage {
    pub fn random() -> Self {
        Self {
            init: "random".into(),
            init_digest: None,
            fresh: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub config: RunConfig,
    pub lineage: Lineage,
    pub train_size: usize,
    pub holdout_size: usize,
    pub records: Vec<StepRecord>,
    pub holdout_accuracy: Option<f64>,
    /// Set by the caller once the checkpoint is written.
    pub checkpoint: Option<String>,
    /// Not serialized so reruns produce identical report files.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A finished stage: report, weights, and optimizer state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub state: ModelState,
    pub optimizer: OptimState,
}

/// Seeded split of `0..n` into `(train, holdout)`; the holdout has
/// `round(n * fraction)` indices and both lists are sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::label("holdout")]));
    let k = ((n as f64) * fraction).round() as usize;
    let mut holdout = order[..k.min(n)].to_vec();
    let mut train = order[k.min(n)..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

fn encode_all(config: &RunConfig, pairs: &[PairRecord]) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            let enc = p.encode();
            if enc.total_tokens() > config.max_length {
                return Err(Error::Input(format!(
                    "pair {} packs to {} tokens, max_length is {}",
                    p.id,
                    enc.total_tokens(),
                    config.max_length
                )));
            }
            Ok(enc)
        })
        .collect()
}

/// Training indices in the order they are consumed, one entry per epoch.
fn epoch_orders(train: &[usize], config: &RunConfig) -> Vec<Vec<usize>> {
    (0..config.epoch as u64)
        .map(|e| {
            let mut order = train.to_vec();
            order.shuffle(&mut seed::rng(config.seed, &[seed::label("order"), e]));
            order
        })
        .collect()
}

/// The core loop shared by both stages.
fn run(
    config: &RunConfig,
    objective: Objective,
    mut state: ModelState,
    pairs: &[EncodedPair],
    train: &[usize],
    holdout: &[usize],
    lineage: Lineage,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("no training pairs".into()));
    }
    if state.config != config.model {
        return Err(Error::Load(format!(
            "checkpoint architecture {:?} does not match config {:?}",
            state.config, config.model
        )));
    }
    let model = state.model()?;
    let steps_per_epoch = train.len().div_ceil(config.bs) as u64;
    let schedule = config.schedule(steps_per_epoch * config.epoch as u64);
    schedule.validate()?;
    let mut opt = OptimState::for_model(&state, config.weight_decay);
    let mut records = Vec::with_capacity(schedule.total_steps as usize);
    let mut grads = vec![0.0f32; state.params.len()];
    let mut step = 0u64;
    for order in epoch_orders(train, config) {
        for batch in order.chunks(config.bs) {
            grads.fill(0.0);
            let scale = 1.0 / batch.len() as f32;
            let mut loss = LossBreakdown::default();
            for &i in batch {
                let (l, g) = pair_loss_grad(&model, &state.params, &pairs[i], objective, scale)?;
                grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                loss.lm_loss += l.lm_loss / batch.len() as f64;
                loss.rank_loss += l.rank_loss / batch.len() as f64;
                loss.total += l.total / batch.len() as f64;
            }
            if !loss.total.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss {}", loss.total),
                });
            }
            let grad_norm = clip_grad_norm(&mut grads, config.max_grad_norm);
            let lr = schedule.lr_at(step)?;
            apply_step(&mut state, &mut opt, &grads, lr)?;
            records.push(StepRecord {
                step,
                lr,
                loss,
                grad_norm,
            });
            step += 1;
        }
    }
    let holdout_accuracy = if holdout.is_empty() {
        None
    } else {
        let held: Vec<EncodedPair> = holdout.iter().map(|&i| pairs[i].clone()).collect();
        Some(pairwise_accuracy(&RewardModel::new(&state)?, &held)?)
    };
    Ok(TrainOutcome {
        report: TrainReport {
            stage: config.stage,
            config: config.clone(),
            lineage,
            train_size: train.len(),
            holdout_size: holdout.len(),
            records,
            holdout_accuracy,
            checkpoint: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        state,
        optimizer: opt,
    })
}

/// Splits pairs into training and holdout indices per the config.
pub fn split_for(config: &RunConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut train, holdout) = holdout_split(n, config.holdout_fraction, config.seed);
    if let Some(cap) = config.train_samples {
        if cap < train.len() {
            train.shuffle(&mut seed::rng(config.seed, &[seed::label("subset")]));
            train.truncate(cap);
            train.sort_unstable();
        }
    }
    (train, holdout)
}

/// Preference-model pretraining with the ranking plus language-modeling
/// objective, from a seeded random init.
pub fn pmp_train(config: &RunConfig, pairs: &[PairRecord]) -> Result<TrainOutcome> {
    if config.stage != Stage::Pmp {
        return Err(Error::Config(format!("pmp_train called with stage {}", config.stage)));
    }
    if pairs.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let enc = encode_all(config, pairs)?;
    let (train, holdout) = split_for(config, enc.len());
    let state = ModelState::init(config.model.clone(), config.seed)?;
    let objective = Objective::Pmp {
        rank_weight: config.rank_weight,
    };
    run(config, objective, state, &enc, &train, &holdout, Lineage::random())
}

/// Reward finetuning with the ranking loss only. The holdout split is
/// carved before training and scored at the end. Optimizer moments always
/// start fresh.
pub fn rm_finetune(config: &RunConfig, pairs: &[PairRecord]) -> Result<TrainOutcome> {
    let (init, lineage) = match &config.init {
        Init::Random => (ModelState::init(config.model.clone(), config.seed)?, Lineage::random()),
        Init::Checkpoint(path) => (load_checkpoint(path)?.state, lineage_for(path)?),
    };
    rm_finetune_from(config, pairs, init, lineage)
}

/// Lineage record for a checkpoint-initialized run.
pub fn lineage_for(path: &Path) -> Result<Lineage> {
    Ok(Lineage {
        init: path.display().to_string(),
        init_digest: Some(file_digest(path)?),
        fresh: true,
    })
}

/// As [`rm_finetune`] with the initial weights supplied in memory.
pub fn rm_finetune_from(
    config: &RunConfig,
    pairs: &[PairRecord],
    mut init: ModelState,
    lineage: Lineage,
) -> Result<TrainOutcome> {
    if config.stage != Stage::RmFinetune {
        return Err(Error::Config(format!("rm_finetune called with stage {}", config.stage)));
    }
    if pairs.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    init.step = 0;
    let enc = encode_all(config, pairs)?;
    let (train, holdout) = split_for(config, enc.len());
    run(config, Objective::RankOnly, init, &enc, &train, &holdout, lineage)
}
