//! Pair records, JSONL I/O, and parallel dataset builds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gen_task, summarize, weak_response, TaskFamily, TaskSpec};
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::pairgen::clip_description;
use crate::seed;
use crate::step::EncodedPair;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    /// Seed of the task behind this pair.
    pub seed: u64,
    /// Mutations applied to the rejected response, joined with `+`.
    pub mutation_kind: String,
    /// Whether chosen and rejected are terminated with the EOC token.
    #[serde(default)]
    pub eoc: bool,
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub family: TaskFamily,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub meta: PairMeta,
}

/// A tokenized pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferencePair {
    pub id: String,
    pub prompt: TokenSequence,
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
    pub family: TaskFamily,
    pub meta: PairMeta,
}

impl PairRecord {
    pub fn encode(&self) -> EncodedPair {
        let tok = Tokenizer;
        EncodedPair {
            prompt: tok.prompt_ids(&self.prompt),
            chosen: tok.response_ids(&self.chosen, self.meta.eoc),
            rejected: tok.response_ids(&self.rejected, self.meta.eoc),
        }
    }

    pub fn tokenized(&self) -> Result<PreferencePair> {
        let enc = self.encode();
        Ok(PreferencePair {
            id: self.id.clone(),
            prompt: TokenSequence::from_ids(enc.prompt)?,
            chosen: TokenSequence::from_ids(enc.chosen)?,
            rejected: TokenSequence::from_ids(enc.rejected)?,
            family: self.family,
            meta: self.meta.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub family: TaskFamily,
    pub n_pairs: usize,
    pub seed: u64,
    pub eoc: bool,
    /// Longest packed pair (`prompt + chosen + rejected` tokens) kept.
    pub max_length: usize,
    /// Fraction of prompt words removed per pair; 0 disables clipping.
    pub clip_ratio: f64,
    pub workers: usize,
}

impl BuildOptions {
    pub fn new(family: TaskFamily, n_pairs: usize, seed: u64) -> Self {
        Self {
            family,
            n_pairs,
            seed,
            eoc: false,
            max_length: 192,
            clip_ratio: 0.0,
            workers: 1,
        }
    }
}

/// Attempts per index before a build gives up.
const PAIR_ATTEMPTS: u64 = 64;

fn make_pair(opts: &BuildOptions, index: usize) -> Result<PairRecord> {
    let family_tag = seed::label(opts.family.as_str());
    for attempt in 0..PAIR_ATTEMPTS {
        let task_seed = seed::derive(opts.seed, &[family_tag, index as u64, attempt]);
        let spec = gen_task(opts.family, task_seed);
        let Ok(weak) = weak_response(&spec, seed::derive(task_seed, &[seed::label("mutation")])) else {
            continue;
        };
        let mut prompt = summarize(spec.reference(), &spec);
        if opts.clip_ratio > 0.0 {
            prompt = clip_description(&prompt, opts.clip_ratio, task_seed);
        }
        let record = PairRecord {
            id: format!("{}-{}-{index:06}", opts.family, opts.seed),
            family: opts.family,
            prompt,
            chosen: spec.render_response(spec.reference()),
            rejected: spec.render_response(&weak.program),
            meta: PairMeta {
                seed: task_seed,
                mutation_kind: weak.kind_label(),
                eoc: opts.eoc,
            },
        };
        if record.encode().total_tokens() <= opts.max_length {
            return Ok(record);
        }
    }
    Err(Error::Generation(format!(
        "pair {index}: no candidate within {} packed tokens after {PAIR_ATTEMPTS} attempts",
        opts.max_length
    )))
}

/// Generates pairs in memory. Output depends only on the options, never on
/// `workers`.
pub fn generate_pairs(opts: &BuildOptions) -> Result<Vec<PairRecord>> {
    if opts.n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..opts.n_pairs).into_par_iter().map(|i| make_pair(opts, i)).collect())
}

/// One row of the length table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub language: String,
    pub files: usize,
    pub tokens: usize,
    pub avg_chosen: f64,
    pub avg_rejected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub rows: Vec<LengthRow>,
    pub total: LengthRow,
    pub avg_prompt: f64,
    pub eoc: bool,
    pub mutation_kinds: BTreeMap<String, usize>,
    /// Fraction of rejected responses that miss at least one probe.
    pub rejected_failing_fraction: f64,
}

impl DatasetStats {
    pub fn from_records(records: &[PairRecord]) -> Self {
        let mut by_family: BTreeMap<TaskFamily, (usize, usize, usize, usize)> = BTreeMap::new();
        let mut mutation_kinds = BTreeMap::new();
        let mut prompt_tokens = 0usize;
        let mut failing = 0usize;
        for r in records {
            let enc = r.encode();
            let e = by_family.entry(r.family).or_default();
            e.0 += 1;
            e.1 += enc.total_tokens();
            e.2 += enc.chosen.len();
            e.3 += enc.rejected.len();
            prompt_tokens += enc.prompt.len();
            *mutation_kinds.entry(r.meta.mutation_kind.clone()).or_insert(0) += 1;
            if rejected_fails(r) {
                failing += 1;
            }
        }
        let row = |language: String, (n, tokens, chosen, rejected): (usize, usize, usize, usize)| LengthRow {
            language,
            files: n,
            tokens,
            avg_chosen: chosen as f64 / n.max(1) as f64,
            avg_rejected: rejected as f64 / n.max(1) as f64,
        };
        let totals = by_family
            .values()
            .fold((0, 0, 0, 0), |a, v| (a.0 + v.0, a.1 + v.1, a.2 + v.2, a.3 + v.3));
        let n = records.len().max(1) as f64;
        Self {
            rows: by_family.iter().map(|(f, v)| row(f.to_string(), *v)).collect(),
            total: row("total".into(), totals),
            avg_prompt: prompt_tokens as f64 / n,
            eoc: records.first().is_some_and(|r| r.meta.eoc),
            mutation_kinds,
            rejected_failing_fraction: failing as f64 / n,
        }
    }

    /// `|avg_chosen - avg_rejected| / avg_chosen` over all pairs.
    pub fn length_gap(&self) -> f64 {
        (self.total.avg_chosen - self.total.avg_rejected).abs() / self.total.avg_chosen
    }
}

/// Re-derives the task from the record's seed and checks the rejected
/// answer against the probes.
fn rejected_fails(r: &PairRecord) -> bool {
    let spec: TaskSpec = gen_task(r.family, r.meta.seed);
    let weak = weak_response(&spec, seed::derive(r.meta.seed, &[seed::label("mutation")]));
    match weak {
        Ok(w) => !spec.is_correct(&w.program),
        Err(_) => false,
    }
}

pub fn write_pairs(path: &Path, records: &[PairRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Sidecar path for a pair file: `pairs.jsonl` becomes `pairs.stats.json`.
pub fn stats_path(pairs: &Path) -> PathBuf {
    pairs.with_extension("stats.json")
}

/// Generates, writes the JSONL file and its stats sidecar, and returns the
/// stats.
pub fn build_dataset(opts: &BuildOptions, out: &Path) -> Result<DatasetStats> {
    let records = generate_pairs(opts)?;
    write_pairs(out, &records)?;
    let stats = DatasetStats::from_records(&records);
    let side = stats_path(out);
    let text = serde_json::to_string_pretty(&stats)?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_count_does_not_change_output() {
        let mut opts = BuildOptions::new(TaskFamily::PmpCode, 200, 7);
        let one = generate_pairs(&opts).unwrap();
        opts.workers = 4;
        assert_eq!(one, generate_pairs(&opts).unwrap());
    }

    #[test]
    fn pairs_respect_invariants() {
        for family in [TaskFamily::PmpCode, TaskFamily::DownstreamReason] {
            let mut opts = BuildOptions::new(family, 300, 3);
            opts.eoc = true;
            for r in generate_pairs(&opts).unwrap() {
                let enc = r.encode();
                assert_ne!(enc.chosen, enc.rejected);
                assert!(enc.total_tokens() <= opts.max_length);
                assert_eq!(*enc.chosen.last().unwrap(), crate::tokenizer::EOC);
                let spec = gen_task(family, r.meta.seed);
                assert_eq!(r.chosen, spec.render_response(spec.reference()));
            }
        }
    }

    #[test]
    fn zero_pairs_is_rejected() {
        assert!(generate_pairs(&BuildOptions::new(TaskFamily::PmpCode, 0, 1)).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let stats = build_dataset(&BuildOptions::new(TaskFamily::DownstreamReason, 20, 1), &path).unwrap();
        assert_eq!(stats.total.files, 20);
        let back = read_pairs(&path).unwrap();
        assert_eq!(back.len(), 20);
        let first = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["id", "family", "prompt", "chosen", "rejected", "meta"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["meta"]["seed"].is_u64());
        assert!(v["meta"]["mutation_kind"].is_string());
        assert!(stats_path(&path).exists());
    }

    #[test]
    fn unwritable_output_is_an_io_error() {
        let opts = BuildOptions::new(TaskFamily::PmpCode, 2, 1);
        let err = build_dataset(&opts, Path::new("/nonexistent-dir/x/pairs.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
