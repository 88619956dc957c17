//! Reward-model metrics: pairwise accuracy and Best-of-N selection.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, Packed, TokenId, TokenSequence, Transformer};
use crate::pairgen::{gen_task, strong_sample, weak_response, TaskFamily};
use crate::seed;
use crate::step::EncodedPair;
use crate::tokenizer::Tokenizer;

/// Anything that assigns rewards to responses.
pub trait Scorer {
    fn score_pair(&self, pair: &EncodedPair) -> Result<(f64, f64)>;

    fn score_candidates(&self, prompt: &[TokenId], responses: &[&[TokenId]]) -> Result<Vec<f64>>;
}

/// A checkpointed model used as a scorer.
pub struct RewardModel<'a> {
    model: Transformer,
    params: &'a [f32],
}

impl<'a> RewardModel<'a> {
    pub fn new(state: &'a ModelState) -> Result<Self> {
        let model = state.model()?;
        if !state.config.reward_head {
            return Err(Error::Capability("model has no reward head".into()));
        }
        Ok(Self {
            model,
            params: &state.params,
        })
    }
}

impl Scorer for RewardModel<'_> {
    fn score_pair(&self, pair: &EncodedPair) -> Result<(f64, f64)> {
        let (packed, rows) = pair.pack();
        let (c, r) = self.model.score_pair(self.params, &packed, &rows)?;
        Ok((f64::from(c), f64::from(r)))
    }

    fn score_candidates(&self, prompt: &[TokenId], responses: &[&[TokenId]]) -> Result<Vec<f64>> {
        let (packed, last) = Packed::fanout(prompt, responses)?;
        let scores = self.model.score_fanout(self.params, &packed, &last)?;
        Ok(scores.into_iter().map(f64::from).collect())
    }
}

/// Fraction of `(chosen, rejected)` score pairs with chosen strictly ahead.
pub fn accuracy_from_scores(scores: &[(f64, f64)]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|(c, r)| c > r).count() as f64 / scores.len() as f64
}

/// Ties count as incorrect.
pub fn pairwise_accuracy<S: Scorer + ?Sized>(scorer: &S, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("pairwise accuracy of an empty pair set".into()));
    }
    let scores = pairs.iter().map(|p| scorer.score_pair(p)).collect::<Result<Vec<_>>>()?;
    Ok(accuracy_from_scores(&scores))
}

/// Index of the highest score; the lowest index wins ties. NaN ranks last.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b || (b.is_nan() && !s.is_nan())) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// One Best-of-N problem as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonRecord {
    pub query: String,
    pub candidates: Vec<String>,
    pub correct: Vec<bool>,
}

/// A tokenized Best-of-N problem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BonProblem {
    pub query: TokenSequence,
    pub candidates: Vec<TokenSequence>,
    pub correct: Vec<bool>,
}

impl BonProblem {
    pub fn new(query: TokenSequence, candidates: Vec<TokenSequence>, correct: Vec<bool>) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != correct.len() {
            return Err(Error::Input(format!(
                "{} candidates with {} correctness flags",
                candidates.len(),
                correct.len()
            )));
        }
        Ok(Self {
            query,
            candidates,
            correct,
        })
    }

    pub fn from_record(rec: &BonRecord, eoc: bool) -> Result<Self> {
        let t = Tokenizer;
        let candidates = rec
            .candidates
            .iter()
            .map(|c| TokenSequence::from_ids(t.response_ids(c, eoc)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(TokenSequence::from_ids(t.prompt_ids(&rec.query))?, candidates, rec.correct.clone())
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    fn first_n_scores<S: Scorer + ?Sized>(&self, scorer: &S, n: usize) -> Result<Vec<f64>> {
        let responses: Vec<&[TokenId]> = self.candidates[..n].iter().map(|c| c.valid_ids()).collect();
        scorer.score_candidates(self.query.valid_ids(), &responses)
    }
}

/// Best-of-N choice among all candidates.
pub fn bon_select<S: Scorer + ?Sized>(scorer: &S, problem: &BonProblem) -> Result<usize> {
    let scores = problem.first_n_scores(scorer, problem.n())?;
    Ok(argmax_first(&scores).expect("problems have at least one candidate"))
}

fn check_n(problems: &[BonProblem], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Input("n must be at least 1".into()));
    }
    if let Some((i, p)) = problems.iter().enumerate().find(|(_, p)| p.n() < n) {
        return Err(Error::Input(format!("problem {i} has {} candidates, n = {n}", p.n())));
    }
    Ok(())
}

/// Per-problem selections over the first `n` candidates.
pub fn bon_selections<S: Scorer + ?Sized>(scorer: &S, problems: &[BonProblem], n: usize) -> Result<Vec<usize>> {
    check_n(problems, n)?;
    problems
        .iter()
        .map(|p| Ok(argmax_first(&p.first_n_scores(scorer, n)?).expect("n >= 1")))
        .collect()
}

/// Fraction of problems whose pick among the first `n` candidates is correct.
pub fn bon_accuracy<S: Scorer + ?Sized>(scorer: &S, problems: &[BonProblem], n: usize) -> Result<f64> {
    if problems.is_empty() {
        return Err(Error::Input("no problems".into()));
    }
    let picks = bon_selections(scorer, problems, n)?;
    let hits = picks.iter().zip(problems).filter(|(&i, p)| p.correct[i]).count();
    Ok(hits as f64 / problems.len() as f64)
}

/// Four candidates with exactly one correct, scored as Best-of-4.
pub fn mc_accuracy<S: Scorer + ?Sized>(scorer: &S, problems: &[BonProblem]) -> Result<f64> {
    for (i, p) in problems.iter().enumerate() {
        let n_true = p.correct.iter().filter(|&&c| c).count();
        if p.n() != 4 || n_true != 1 {
            return Err(Error::Input(format!(
                "problem {i}: multiple choice needs 4 candidates with one correct, got {} with {n_true}",
                p.n()
            )));
        }
    }
    bon_accuracy(scorer, problems, 4)
}

/// Fraction of problems with a correct candidate among the first `n`.
pub fn coverage(problems: &[BonProblem], n: usize) -> Result<f64> {
    check_n(problems, n)?;
    if problems.is_empty() {
        return Err(Error::Input("no problems".into()));
    }
    let hit = problems.iter().filter(|p| p.correct[..n].iter().any(|&c| c)).count();
    Ok(hit as f64 / problems.len() as f64)
}

/// Candidate pools mixing strong (correct) and weak (mutated) answers.
/// Each slot is an equivalent rewrite of the reference with probability
/// `p_correct`, otherwise an independent mutation.
pub fn generate_bon_records(
    family: TaskFamily,
    count: usize,
    n_candidates: usize,
    p_correct: f64,
    seed: u64,
) -> Result<Vec<BonRecord>> {
    let tag = seed::label("bon");
    (0..count as u64)
        .map(|i| {
            let task_seed = seed::derive(seed, &[tag, seed::label(family.as_str()), i]);
            let spec = gen_task(family, task_seed);
            let mut rng = seed::rng(task_seed, &[tag]);
            let mut candidates = Vec::with_capacity(n_candidates);
            let mut correct = Vec::with_capacity(n_candidates);
            for k in 0..n_candidates as u64 {
                let prog = if rng.random_bool(p_correct) {
                    strong_sample(&spec, seed::derive(task_seed, &[tag, k]))
                } else {
                    weak_response(&spec, seed::derive(task_seed, &[tag, k]))?.program
                };
                correct.push(spec.is_correct(&prog));
                candidates.push(spec.render_response(&prog));
            }
            Ok(BonRecord {
                query: crate::pairgen::summarize(spec.reference(), &spec),
                candidates,
                correct,
            })
        })
        .collect()
}

pub fn write_bon(path: &Path, records: &[BonRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_bon(path: &Path) -> Result<Vec<BonRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores responses by a lookup on their first token.
    struct FirstToken;

    impl Scorer for FirstToken {
        fn score_pair(&self, pair: &EncodedPair) -> Result<(f64, f64)> {
            Ok((f64::from(pair.chosen[0]), f64::from(pair.rejected[0])))
        }

        fn score_candidates(&self, _: &[TokenId], responses: &[&[TokenId]]) -> Result<Vec<f64>> {
            Ok(responses.iter().map(|r| f64::from(r[0])).collect())
        }
    }

    fn pair(c: TokenId, r: TokenId) -> EncodedPair {
        EncodedPair {
            prompt: vec![1],
            chosen: vec![c],
            rejected: vec![r],
        }
    }

    fn problem(first_tokens: &[TokenId], correct: &[bool]) -> BonProblem {
        let cands = first_tokens.iter().map(|&t| TokenSequence::from_ids(vec![t]).unwrap()).collect();
        BonProblem::new(TokenSequence::from_ids(vec![1]).unwrap(), cands, correct.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_pairwise_accuracy() {
        let pairs = [pair(5, 1), pair(3, 2), pair(9, 0), pair(1, 4)];
        assert_eq!(pairwise_accuracy(&FirstToken, &pairs).unwrap(), 0.75);
        assert_eq!(pairwise_accuracy(&FirstToken, &[pair(2, 2)]).unwrap(), 0.0);
        assert!(pairwise_accuracy(&FirstToken, &[]).is_err());
    }

    #[test]
    fn selection_rules() {
        assert_eq!(argmax_first(&[1.0]), Some(0));
        assert_eq!(argmax_first(&[2.0, 2.0, 2.0]), Some(0));
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[f64::NAN, 1.0]), Some(1));
        assert_eq!(bon_select(&FirstToken, &problem(&[4, 7, 7], &[false, true, true])).unwrap(), 1);
    }

    #[test]
    fn bon_uses_first_n_and_checks_bounds() {
        let probs = [problem(&[1, 9, 5], &[true, false, true]), problem(&[8, 2, 3], &[false, true, false])];
        assert_eq!(bon_accuracy(&FirstToken, &probs, 1).unwrap(), 0.5);
        assert_eq!(bon_accuracy(&FirstToken, &probs, 2).unwrap(), 0.0);
        assert!(matches!(bon_accuracy(&FirstToken, &probs, 4), Err(Error::Input(_))));
        assert_eq!(coverage(&probs, 1).unwrap(), 0.5);
        assert_eq!(coverage(&probs, 3).unwrap(), 1.0);
    }

    #[test]
    fn multiple_choice_validates_shape() {
        let ok = [problem(&[1, 2, 3, 4], &[false, false, false, true])];
        assert_eq!(mc_accuracy(&FirstToken, &ok).unwrap(), 1.0);
        assert_eq!(mc_accuracy(&FirstToken, &ok).unwrap(), bon_accuracy(&FirstToken, &ok, 4).unwrap());
        let two = [problem(&[1, 2, 3, 4], &[true, false, false, true])];
        assert!(mc_accuracy(&FirstToken, &two).is_err());
        let three = [problem(&[1, 2, 3], &[true, false, false])];
        assert!(mc_accuracy(&FirstToken, &three).is_err());
    }

    #[test]
    fn generated_pools_carry_true_flags() {
        let recs = generate_bon_records(TaskFamily::DownstreamReason, 30, 16, 0.3, 4).unwrap();
        assert_eq!(recs, generate_bon_records(TaskFamily::DownstreamReason, 30, 16, 0.3, 4).unwrap());
        let mut n_true = 0;
        for r in &recs {
            assert_eq!(r.candidates.len(), 16);
            n_true += r.correct.iter().filter(|&&c| c).count();
            let p = BonProblem::from_record(r, false).unwrap();
            assert_eq!(p.n(), 16);
        }
        let frac = n_true as f64 / (30.0 * 16.0);
        assert!((0.2..0.4).contains(&frac), "{frac}");
    }

    #[test]
    fn bon_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bon.jsonl");
        let recs = generate_bon_records(TaskFamily::PmpCode, 3, 4, 0.5, 1).unwrap();
        write_bon(&path, &recs).unwrap();
        assert_eq!(read_bon(&path).unwrap(), recs);
    }
}
