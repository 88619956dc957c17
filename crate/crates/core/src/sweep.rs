//! Sample-efficiency and pair-count sweeps over fresh retrains.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, save_checkpoint};
use crate::config::{Init, RunConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::{bon_accuracy, generate_bon_records, BonProblem, RewardModel};
use crate::model::ModelState;
use crate::pairgen::{generate_pairs, BuildOptions, PairRecord, TaskFamily};
use crate::train::{pmp_train, rm_finetune_from, Lineage, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    FinetuneSamples,
    PmpPairs,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::FinetuneSamples => "finetune_samples",
            Axis::PmpPairs => "pmp_pairs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Finetuned from a pretrained checkpoint.
    Pmp,
    /// Finetuned from a random init.
    Random,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Pmp => "pmp",
            Arm::Random => "random",
        })
    }
}

/// Downstream pair set used for finetuning and the holdout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_pairs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonSpec {
    pub problems: usize,
    pub n: usize,
    pub p_correct: f64,
    #[serde(default)]
    pub seed: u64,
}

fn both_arms() -> Vec<Arm> {
    vec![Arm::Pmp, Arm::Random]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "both_arms")]
    pub arms: Vec<Arm>,
    /// Pretraining pairs when the axis is `finetune_samples`.
    #[serde(default)]
    pub pmp_pairs: usize,
    /// Finetuning pairs when the axis is `pmp_pairs`; all when absent.
    #[serde(default)]
    pub finetune_samples: Option<usize>,
    /// Seed of the pretraining corpus.
    #[serde(default)]
    pub pmp_data_seed: u64,
    /// Retrain the pretrained model for every seed instead of sharing one.
    #[serde(default)]
    pub pmp_per_seed: bool,
    pub downstream: DataSpec,
    #[serde(default)]
    pub bon: Option<BonSpec>,
    pub pmp: RunConfig,
    pub finetune: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("grid must be non-empty and strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("arms must be non-empty".into()));
        }
        if self.pmp.stage != Stage::Pmp || self.finetune.stage != Stage::RmFinetune {
            return Err(Error::Config("pmp/finetune base configs have the wrong stage".into()));
        }
        if self.axis == Axis::FinetuneSamples && self.arms.contains(&Arm::Pmp) && self.pmp_pairs == 0 {
            return Err(Error::Config("pmp_pairs must be set for a finetune_samples sweep".into()));
        }
        if self.pmp.model != self.finetune.model {
            return Err(Error::Config("pmp and finetune model configs differ".into()));
        }
        self.pmp.validate()?;
        self.finetune.validate()
    }
}

/// One line of the long-format results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub axis: Axis,
    pub value: usize,
    pub seed: u64,
    pub arm: Arm,
    pub metric: String,
    pub score: Option<f64>,
    pub status: String,
}

pub const RESULT_COLUMNS: [&str; 7] = ["axis", "value", "seed", "arm", "metric", "score", "status"];

/// Per-point record kept next to the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub axis: Axis,
    pub value: usize,
    pub seed: u64,
    pub arm: Arm,
    pub lineage: Lineage,
    pub train_size: usize,
    pub steps: usize,
    pub holdout_accuracy: Option<f64>,
    pub bon_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    pub points: Vec<PointRecord>,
    pub wall_clock_secs: f64,
}

fn digest_state(state: &ModelState) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint::encode(state, None)?)))
}

struct Pretrained {
    state: ModelState,
    lineage: Lineage,
}

fn pretrain(spec: &SweepSpec, corpus: &[PairRecord], n: usize, seed: u64, out: Option<&Path>) -> Result<Pretrained> {
    let mut cfg = spec.pmp.clone();
    cfg.seed = seed;
    let outcome = pmp_train(&cfg, &corpus[..n])?;
    let init = match out {
        Some(dir) => {
            let name = format!("pmp-{n}-s{seed}.ckpt");
            save_checkpoint(&outcome.state, None, &dir.join(&name))?;
            name
        }
        None => format!("memory:pmp-{n}-s{seed}"),
    };
    Ok(Pretrained {
        lineage: Lineage {
            init,
            init_digest: Some(digest_state(&outcome.state)?),
            fresh: true,
        },
        state: outcome.state,
    })
}

fn finetune(
    spec: &SweepSpec,
    downstream: &[PairRecord],
    samples: Option<usize>,
    seed: u64,
    init: Option<&Pretrained>,
) -> Result<TrainOutcome> {
    let mut cfg = spec.finetune.clone();
    cfg.seed = seed;
    cfg.train_samples = samples;
    match init {
        Some(p) => {
            cfg.init = Init::Checkpoint(PathBuf::from(&p.lineage.init));
            rm_finetune_from(&cfg, downstream, p.state.clone(), p.lineage.clone())
        }
        None => {
            cfg.init = Init::Random;
            let state = ModelState::init(cfg.model.clone(), seed)?;
            rm_finetune_from(&cfg, downstream, state, Lineage::random())
        }
    }
}

/// Runs every `(value, seed, arm)` point from scratch. Failed points are
/// recorded with a failure status and the sweep continues. When `out` is
/// given, pretrained checkpoints are written there and lineage names them
/// relative to it.
pub fn run_sweep(spec: &SweepSpec, out: Option<&Path>) -> Result<SweepOutput> {
    let started = Instant::now();
    spec.validate()?;
    let downstream = generate_pairs(&BuildOptions {
        max_length: spec.finetune.max_length,
        ..BuildOptions::new(TaskFamily::DownstreamReason, spec.downstream.n_pairs, spec.downstream.seed)
    })?;
    let max_pmp = match spec.axis {
        Axis::FinetuneSamples => spec.pmp_pairs,
        Axis::PmpPairs => *spec.grid.last().expect("validated"),
    };
    let corpus = if spec.arms.contains(&Arm::Pmp) && max_pmp > 0 {
        generate_pairs(&BuildOptions {
            max_length: spec.pmp.max_length,
            ..BuildOptions::new(TaskFamily::PmpCode, max_pmp, spec.pmp_data_seed)
        })?
    } else {
        Vec::new()
    };
    let bon: Option<Vec<BonProblem>> = match &spec.bon {
        Some(b) => Some(
            generate_bon_records(TaskFamily::DownstreamReason, b.problems, b.n, b.p_correct, b.seed)?
                .iter()
                .map(|r| BonProblem::from_record(r, false))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let mut cache: BTreeMap<(usize, u64), std::result::Result<Pretrained, String>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &value in &spec.grid {
        for &seed in &spec.seeds {
            for &arm in &spec.arms {
                let (pmp_n, samples) = match spec.axis {
                    Axis::FinetuneSamples => (spec.pmp_pairs, Some(value)),
                    Axis::PmpPairs => (value, spec.finetune_samples),
                };
                let pmp_seed = if spec.pmp_per_seed { seed } else { spec.pmp.seed };
                let init = match arm {
                    Arm::Pmp => {
                        let entry = cache
                            .entry((pmp_n, pmp_seed))
                            .or_insert_with(|| pretrain(spec, &corpus, pmp_n, pmp_seed, out).map_err(|e| e.to_string()));
                        Some(entry.as_ref())
                    }
                    Arm::Random => None,
                };
                let result = match init {
                    Some(Err(e)) => Err(Error::Training {
                        step: 0,
                        reason: format!("pretraining failed: {e}"),
                    }),
                    Some(Ok(p)) => finetune(spec, &downstream, samples, seed, Some(p)),
                    None => finetune(spec, &downstream, samples, seed, None),
                };
                let point = evaluate_point(spec, value, seed, arm, result, bon.as_deref());
                rows.extend(point_rows(&point, spec.bon.as_ref()));
                points.push(point);
            }
        }
    }
    Ok(SweepOutput {
        rows,
        points,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn evaluate_point(
    spec: &SweepSpec,
    value: usize,
    seed: u64,
    arm: Arm,
    result: Result<TrainOutcome>,
    bon: Option<&[BonProblem]>,
) -> PointRecord {
    let mut point = PointRecord {
        axis: spec.axis,
        value,
        seed,
        arm,
        lineage: Lineage::random(),
        train_size: 0,
        steps: 0,
        holdout_accuracy: None,
        bon_accuracy: None,
        error: None,
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            point.error = Some(e.to_string());
            return point;
        }
    };
    point.lineage = outcome.report.lineage.clone();
    point.train_size = outcome.report.train_size;
    point.steps = outcome.report.records.len();
    point.holdout_accuracy = outcome.report.holdout_accuracy;
    if let (Some(problems), Some(b)) = (bon, &spec.bon) {
        let scored = RewardModel::new(&outcome.state).and_then(|rm| bon_accuracy(&rm, problems, b.n));
        match scored {
            Ok(acc) => point.bon_accuracy = Some(acc),
            Err(e) => point.error = Some(e.to_string()),
        }
    }
    point
}

fn point_rows(point: &PointRecord, bon: Option<&BonSpec>) -> Vec<ResultRow> {
    let row = |metric: String, score: Option<f64>| ResultRow {
        axis: point.axis,
        value: point.value,
        seed: point.seed,
        arm: point.arm,
        metric,
        score: if point.error.is_some() { None } else { score },
        status: if point.error.is_some() { "failed".into() } else { "ok".into() },
    };
    let mut out = vec![row("pairwise_accuracy".into(), point.holdout_accuracy)];
    if let Some(b) = bon {
        out.push(row(format!("bon_accuracy@{}", b.n), point.bon_accuracy));
    }
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(RESULT_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.axis.to_string(),
            r.value.to_string(),
            r.seed.to_string(),
            r.arm.to_string(),
            r.metric.clone(),
            score,
            r.status.clone(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Load(format!("{}: {other:?}", path.display())),
    }
}
