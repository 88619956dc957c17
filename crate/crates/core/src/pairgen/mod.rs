//! Synthetic preference-pair generation.
//!
//! Each task is a small integer function with a probe table. The strong
//! oracle answers with the reference program (correct by construction); the
//! weak oracle answers with a seeded mutation of it that still passes the
//! static stack check. Prompts are produced by a template summarizer.

mod dataset;
mod summarize;

pub use dataset::{
    build_dataset, generate_pairs, read_pairs, stats_path, write_pairs, BuildOptions, DatasetStats, LengthRow, PairMeta,
    PairRecord, PreferencePair,
};
pub use summarize::{clip_description, summarize};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{Instr, Operands, Program};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Functions over symbolic arguments, described with a probe table.
    PmpCode,
    /// Integer word problems with a final numeric answer.
    DownstreamReason,
}

impl TaskFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskFamily::PmpCode => "pmp_code",
            TaskFamily::DownstreamReason => "downstream_reason",
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pmp_code" => Ok(TaskFamily::PmpCode),
            "downstream_reason" => Ok(TaskFamily::DownstreamReason),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PROBES_PER_TASK: usize = 4;

/// A functional task plus the program that solves it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub arity: usize,
    pub probe_inputs: Vec<Vec<i64>>,
    pub expected_outputs: Vec<i64>,
    pub seed: u64,
    reference: Program,
}

impl TaskSpec {
    pub fn reference(&self) -> &Program {
        &self.reference
    }

    /// True when `prog` reproduces every probe output.
    pub fn is_correct(&self, prog: &Program) -> bool {
        prog.passes(&self.probe_inputs, &self.expected_outputs)
    }

    /// Response text for `prog` in this family's notation.
    pub fn render_response(&self, prog: &Program) -> String {
        match self.family {
            TaskFamily::PmpCode => prog.render(Operands::Symbolic),
            TaskFamily::DownstreamReason => {
                let args = &self.probe_inputs[0];
                let answer = prog
                    .eval(args)
                    .map(|v| v.to_string())
                    .unwrap_or_else(|_| "?".to_string());
                format!("{} = {answer}", prog.render(Operands::Concrete(args)))
            }
        }
    }
}

/// One step of a reference program after the initial `LOAD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Step {
    AddC(i64),
    SubC(i64),
    MulC(i64),
    AddV(u8),
    SubV(u8),
    MulV(u8),
    ModC(i64),
    Neg,
    Square,
    /// `c - acc`.
    RSubC(i64),
}

impl Step {
    fn code(self) -> Vec<Instr> {
        use Instr::*;
        match self {
            Step::AddC(c) => vec![Push(c), Add],
            Step::SubC(c) => vec![Push(c), Sub],
            Step::MulC(c) => vec![Push(c), Mul],
            Step::AddV(v) => vec![Load(v), Add],
            Step::SubV(v) => vec![Load(v), Sub],
            Step::MulV(v) => vec![Load(v), Mul],
            Step::ModC(c) => vec![Mod(c)],
            Step::Neg => vec![Neg],
            Step::Square => vec![Dup, Mul],
            Step::RSubC(c) => vec![Push(c), Swap, Sub],
        }
    }

    fn apply(self, acc: i64, args: &[i64]) -> i64 {
        match self {
            Step::AddC(c) => acc.wrapping_add(c),
            Step::SubC(c) => acc.wrapping_sub(c),
            Step::MulC(c) => acc.wrapping_mul(c),
            Step::AddV(v) => acc.wrapping_add(args[usize::from(v)]),
            Step::SubV(v) => acc.wrapping_sub(args[usize::from(v)]),
            Step::MulV(v) => acc.wrapping_mul(args[usize::from(v)]),
            Step::ModC(c) => acc.wrapping_rem_euclid(c),
            Step::Neg => acc.wrapping_neg(),
            Step::Square => acc.wrapping_mul(acc),
            Step::RSubC(c) => c.wrapping_sub(acc),
        }
    }
}

/// Start variable plus steps, recovered from a reference program.
pub(crate) struct Plan {
    pub start: u8,
    pub steps: Vec<Step>,
}

/// Inverse of the step encoding; `None` for programs outside the grammar.
pub(crate) fn decompile(prog: &Program) -> Option<Plan> {
    use Instr::*;
    let ins = &prog.instructions;
    let start = match ins.first()? {
        Load(v) => *v,
        _ => return None,
    };
    let mut steps = Vec::new();
    let mut i = 1;
    while i < ins.len() {
        let rest = &ins[i..];
        let (step, used) = match rest {
            [Push(c), Swap, Sub, ..] => (Step::RSubC(*c), 3),
            [Push(c), Add, ..] => (Step::AddC(*c), 2),
            [Push(c), Sub, ..] => (Step::SubC(*c), 2),
            [Push(c), Mul, ..] => (Step::MulC(*c), 2),
            [Load(v), Add, ..] => (Step::AddV(*v), 2),
            [Load(v), Sub, ..] => (Step::SubV(*v), 2),
            [Load(v), Mul, ..] => (Step::MulV(*v), 2),
            [Dup, Mul, ..] => (Step::Square, 2),
            [Mod(c), ..] => (Step::ModC(*c), 1),
            [Neg, ..] => (Step::Neg, 1),
            _ => return None,
        };
        steps.push(step);
        i += used;
    }
    Some(Plan { start, steps })
}

fn assemble(start: u8, steps: &[Step]) -> Program {
    let mut ins = vec![Instr::Load(start)];
    for s in steps {
        ins.extend(s.code());
    }
    Program::new(ins)
}

fn distinct_probes(rng: &mut ChaCha8Rng, arity: usize, lo: i64, hi: i64) -> Vec<Vec<i64>> {
    let mut probes: Vec<Vec<i64>> = Vec::with_capacity(PROBES_PER_TASK);
    while probes.len() < PROBES_PER_TASK {
        let p: Vec<i64> = (0..arity).map(|_| rng.random_range(lo..=hi)).collect();
        if !probes.contains(&p) {
            probes.push(p);
        }
    }
    probes
}

fn code_steps(rng: &mut ChaCha8Rng, arity: usize, start: u8) -> Vec<Step> {
    let n_steps = if rng.random_bool(0.25) { 3 } else { 4 };
    let other = if arity == 2 { 1 - start } else { start };
    let mut steps: Vec<Step> = Vec::with_capacity(n_steps);
    let mut bare = 0;
    while steps.len() < n_steps {
        let c = rng.random_range(2..=12);
        let step = match rng.random_range(0..14) {
            0 | 1 => Step::AddC(c),
            2 | 3 => Step::SubC(c),
            4 | 5 => Step::MulC(c),
            6 => Step::ModC(c),
            7 => Step::Neg,
            8 => Step::Square,
            9 | 10 => Step::RSubC(c),
            11 | 12 if arity == 2 => [Step::AddV(other), Step::SubV(other)][rng.random_range(0..2)],
            13 if arity == 2 => Step::MulV(other),
            _ => continue,
        };
        let is_bare = matches!(step, Step::Neg | Step::Square);
        if steps.last() == Some(&step) || (is_bare && bare > 0) {
            continue;
        }
        bare += usize::from(is_bare);
        steps.push(step);
    }
    steps
}

fn reason_steps(rng: &mut ChaCha8Rng, arity: usize, start_value: i64, second: Option<i64>) -> Vec<Step> {
    let n_steps = rng.random_range(2..=4);
    let mut steps = Vec::with_capacity(n_steps);
    let mut acc = start_value;
    let mut used_second = false;
    while steps.len() < n_steps {
        let c = rng.random_range(2..=9);
        let step = match rng.random_range(0..7) {
            0 | 1 => Step::AddC(c),
            2 | 3 if acc > c => Step::SubC(c),
            4 if acc <= 40 => Step::MulC(c),
            5 | 6 if arity == 2 && !used_second => {
                used_second = true;
                match second {
                    Some(v) if acc > v && rng.random_bool(0.5) => Step::SubV(1),
                    _ => Step::AddV(1),
                }
            }
            _ => continue,
        };
        acc = step.apply(acc, &[start_value, second.unwrap_or(0)]);
        steps.push(step);
    }
    steps
}

/// Seeded task generation. The reference program passes every probe by
/// construction.
pub fn gen_task(family: TaskFamily, seed: u64) -> TaskSpec {
    let mut rng = seed::rng(seed, &[seed::label(family.as_str())]);
    let arity = rng.random_range(1..=2);
    let (start, steps, probe_inputs) = match family {
        TaskFamily::PmpCode => {
            let start = if arity == 2 && rng.random_bool(0.3) { 1 } else { 0 };
            let steps = code_steps(&mut rng, arity, start);
            (start, steps, distinct_probes(&mut rng, arity, -3, 9))
        }
        TaskFamily::DownstreamReason => {
            let probes = distinct_probes(&mut rng, arity, 2, 9);
            let second = (arity == 2).then(|| probes[0][1]);
            let steps = reason_steps(&mut rng, arity, probes[0][0], second);
            (0, steps, probes)
        }
    };
    let reference = assemble(start, &steps);
    let expected_outputs = probe_inputs
        .iter()
        .map(|args| reference.eval(args).expect("generated programs are stack-safe"))
        .collect();
    TaskSpec {
        family,
        arity,
        probe_inputs,
        expected_outputs,
        seed,
        reference,
    }
}

/// The strong oracle: the reference solution.
pub fn strong_response(spec: &TaskSpec) -> Program {
    spec.reference.clone()
}

fn is_atom(i: Instr) -> bool {
    matches!(i, Instr::Push(_) | Instr::Load(_))
}

/// A seeded equivalent rewrite of the reference: leading operands of a
/// commutative op may trade places, `c +` / `c *` may become `c swap +` /
/// `c swap *`, and `c -` may become `c neg +`. Each site flips a fair coin,
/// so different seeds give differently written correct answers.
pub fn strong_sample(spec: &TaskSpec, sample_seed: u64) -> Program {
    let mut rng = seed::rng(sample_seed, &[seed::label("strong")]);
    let src = &spec.reference.instructions;
    let mut out = Vec::with_capacity(src.len() + 4);
    let mut i = 0;
    while i < src.len() {
        let cur = src[i];
        let next = src.get(i + 1).copied();
        let after = src.get(i + 2).copied();
        if i == 0 && is_atom(cur) && next.is_some_and(is_atom) && matches!(after, Some(Instr::Add | Instr::Mul)) {
            if rng.random_bool(0.5) {
                out.extend([next.unwrap(), cur]);
            } else {
                out.extend([cur, next.unwrap()]);
            }
            i += 2;
            continue;
        }
        out.push(cur);
        if i > 0 && is_atom(cur) {
            match next {
                Some(Instr::Add | Instr::Mul) if rng.random_bool(0.5) => out.push(Instr::Swap),
                Some(Instr::Sub) if rng.random_bool(0.5) => {
                    out.extend([Instr::Neg, Instr::Add]);
                    i += 2;
                    continue;
                }
                _ => {}
            }
        }
        i += 1;
    }
    let prog = Program::new(out);
    if spec.is_correct(&prog) {
        prog
    } else {
        spec.reference.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    Constant,
    OpcodeSwap,
    Deletion,
    Truncation,
}

impl MutationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::Constant => "constant",
            MutationKind::OpcodeSwap => "opcode_swap",
            MutationKind::Deletion => "deletion",
            MutationKind::Truncation => "truncation",
        }
    }
}

/// A weak-oracle answer and the mutations that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakResponse {
    pub program: Program,
    pub kinds: Vec<MutationKind>,
}

impl WeakResponse {
    pub fn kind_label(&self) -> String {
        self.kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+")
    }
}

pub const WEAK_ATTEMPTS: usize = 32;

fn pick_kind(rng: &mut ChaCha8Rng) -> MutationKind {
    let r: f64 = rng.random();
    if r < 0.45 {
        MutationKind::Constant
    } else if r < 0.85 {
        MutationKind::OpcodeSwap
    } else if r < 0.95 {
        MutationKind::Deletion
    } else {
        MutationKind::Truncation
    }
}

fn perturb_constant(rng: &mut ChaCha8Rng, c: i64) -> i64 {
    loop {
        let cand = rng.random_range(1..=12);
        if cand != c {
            return cand;
        }
    }
}

/// Applies one mutation of `kind` in place; `false` if the program offers
/// no site for it.
fn mutate_once(rng: &mut ChaCha8Rng, prog: &mut Program, kind: MutationKind) -> bool {
    let ins = &mut prog.instructions;
    match kind {
        MutationKind::Constant => {
            let sites: Vec<usize> = (0..ins.len())
                .filter(|&i| matches!(ins[i], Instr::Push(_) | Instr::Mod(_)))
                .collect();
            let Some(&i) = sites.choose(rng) else { return false };
            ins[i] = match ins[i] {
                Instr::Push(c) => Instr::Push(perturb_constant(rng, c)),
                Instr::Mod(c) => Instr::Mod(perturb_constant(rng, c).max(2)),
                other => other,
            };
            true
        }
        MutationKind::OpcodeSwap => {
            let sites: Vec<usize> = (0..ins.len())
                .filter(|&i| ins[i].is_binary_arith() || matches!(ins[i], Instr::Neg | Instr::Mod(_)))
                .collect();
            let Some(&i) = sites.choose(rng) else { return false };
            ins[i] = match ins[i] {
                Instr::Neg => Instr::Mod(rng.random_range(2..=9)),
                Instr::Mod(_) => Instr::Neg,
                op => *[Instr::Add, Instr::Sub, Instr::Mul]
                    .iter()
                    .filter(|&&o| o != op)
                    .collect::<Vec<_>>()
                    .choose(rng)
                    .copied()
                    .expect("two alternatives"),
            };
            true
        }
        MutationKind::Deletion => {
            if ins.len() < 2 {
                return false;
            }
            let i = rng.random_range(1..ins.len());
            ins.remove(i);
            true
        }
        MutationKind::Truncation => {
            if ins.len() < 3 {
                return false;
            }
            let keep_min = ins.len().saturating_sub(3).max(1);
            let keep = rng.random_range(keep_min..ins.len());
            ins.truncate(keep);
            true
        }
    }
}

/// The weak oracle: one to three seeded mutations of the reference,
/// re-rolled until the result is stack-safe and its text differs from the
/// chosen response.
pub fn weak_response(spec: &TaskSpec, mutation_seed: u64) -> Result<WeakResponse> {
    let chosen_text = spec.render_response(&spec.reference);
    for attempt in 0..WEAK_ATTEMPTS as u64 {
        let mut rng = seed::rng(spec.seed, &[seed::label("weak"), mutation_seed, attempt]);
        let n = match rng.random::<f64>() {
            r if r < 0.6 => 1,
            r if r < 0.9 => 2,
            _ => 3,
        };
        let mut prog = spec.reference.clone();
        let mut kinds = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = pick_kind(&mut rng);
            if mutate_once(&mut rng, &mut prog, kind) {
                kinds.push(kind);
            }
        }
        if kinds.is_empty() || !prog.is_stack_safe(spec.arity) {
            continue;
        }
        if spec.render_response(&prog) != chosen_text {
            return Ok(WeakResponse { program: prog, kinds });
        }
    }
    Err(Error::Generation(format!(
        "no distinct stack-safe mutation within {WEAK_ATTEMPTS} attempts (task seed {})",
        spec.seed
    )))
}

/// Evaluates `prog` on `args`.
pub fn eval_program(prog: &Program, args: &[i64]) -> Result<i64> {
    prog.eval(args)
}
