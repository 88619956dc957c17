//! Template summarizer: turns a task into a prompt without printing any
//! instruction of the program.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{decompile, Step, TaskFamily, TaskSpec};
use crate::dsl::{Program, ARG_NAMES};
use crate::seed;

/// Phrase pools for function descriptions. `{c}` is a constant, `{v}` an
/// argument name.
pub(crate) mod code_phrases {
    pub const HEADER: &[&str] = &["def f({args}):", "function f({args}):"];
    pub const START: &[&str] = &["take {v}", "start from {v}"];
    pub const ADD_C: &[&str] = &["add {c}", "plus {c}"];
    pub const SUB_C: &[&str] = &["subtract {c}", "minus {c}"];
    pub const MUL_C: &[&str] = &["multiply by {c}", "times {c}"];
    pub const ADD_V: &[&str] = &["add {v}", "plus {v}"];
    pub const SUB_V: &[&str] = &["subtract {v}", "minus {v}"];
    pub const MUL_V: &[&str] = &["multiply by {v}", "times {v}"];
    pub const MOD_C: &[&str] = &["mod {c}", "remainder mod {c}"];
    pub const NEG: &[&str] = &["negate", "change sign"];
    pub const SQUARE: &[&str] = &["square it", "square"];
    pub const RSUB_C: &[&str] = &["subtract from {c}", "take from {c}"];
}

/// Phrase pools for word problems. `{n}` and `{f}` are people, `{i}` the
/// item noun, `{c}` a constant, `{a}` and `{b}` starting amounts.
pub(crate) mod story_phrases {
    pub const OPEN: &[&str] = &["{n} has {a} {i}.", "{n} owns {a} {i}."];
    pub const FRIEND: &[&str] = &["{f} has {b}.", "{f} keeps {b}."];
    pub const ADD_C: &[&str] = &["Finds {c} more.", "Buys {c} more."];
    pub const SUB_C: &[&str] = &["Gives away {c}.", "Loses {c}."];
    pub const MUL_C: &[&str] = &["Pile grows {c} fold.", "Stash grows {c} fold."];
    pub const ADD_V: &[&str] = &["Gets all of {f}'s.", "{f} hands over all."];
    pub const SUB_V: &[&str] = &["Pays {f} as many as {f} had.", "Hands {f} that many."];
    pub const ASK: &[&str] = &["How many now?", "Count at the end?"];
    pub const NAMES: &[&str] = &["Ada", "Ben", "Cleo", "Dev", "Eli", "Fay", "Gus", "Ivy", "Jon", "Kai", "Lea", "Max"];
    pub const ITEMS: &[&str] = &["apples", "coins", "stamps", "shells", "marbles", "pens", "cards", "beads"];
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("non-empty phrase pool")
}

fn arg_list(arity: usize) -> String {
    ARG_NAMES[..arity].iter().map(char::to_string).collect::<Vec<_>>().join(",")
}

fn join_args(args: &[i64]) -> String {
    args.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
}

fn describe_code(rng: &mut ChaCha8Rng, prog: &Program, spec: &TaskSpec) -> String {
    use code_phrases::*;
    let plan = decompile(prog).expect("reference programs follow the step grammar");
    let var = |v: u8| ARG_NAMES[usize::from(v)].to_string();
    let mut parts = vec![pick(rng, START).replace("{v}", &var(plan.start))];
    for step in &plan.steps {
        let (pool, c, v) = match *step {
            Step::AddC(c) => (ADD_C, c, 0),
            Step::SubC(c) => (SUB_C, c, 0),
            Step::MulC(c) => (MUL_C, c, 0),
            Step::AddV(v) => (ADD_V, 0, v),
            Step::SubV(v) => (SUB_V, 0, v),
            Step::MulV(v) => (MUL_V, 0, v),
            Step::ModC(c) => (MOD_C, c, 0),
            Step::Neg => (NEG, 0, 0),
            Step::Square => (SQUARE, 0, 0),
            Step::RSubC(c) => (RSUB_C, c, 0),
        };
        parts.push(pick(rng, pool).replace("{c}", &c.to_string()).replace("{v}", &var(v)));
    }
    let header = pick(rng, HEADER).replace("{args}", &arg_list(spec.arity));
    let probes: Vec<String> = spec
        .probe_inputs
        .iter()
        .zip(&spec.expected_outputs)
        .map(|(args, out)| format!("f({})={out}", join_args(args)))
        .collect();
    format!("{header} {}. {}.", parts.join(", "), probes.join("; "))
}

fn describe_story(rng: &mut ChaCha8Rng, prog: &Program, spec: &TaskSpec) -> String {
    use story_phrases::*;
    let plan = decompile(prog).expect("reference programs follow the step grammar");
    let name = pick(rng, NAMES);
    let friend = loop {
        let f = pick(rng, NAMES);
        if f != name {
            break f;
        }
    };
    let item = pick(rng, ITEMS);
    let args = &spec.probe_inputs[0];
    let fill = |s: &str, c: i64| {
        s.replace("{n}", name)
            .replace("{f}", friend)
            .replace("{i}", item)
            .replace("{a}", &args[0].to_string())
            .replace("{b}", &args.get(1).copied().unwrap_or(0).to_string())
            .replace("{c}", &c.to_string())
    };
    let mut sentences = vec![fill(pick(rng, OPEN), 0)];
    if spec.arity == 2 {
        sentences.push(fill(pick(rng, FRIEND), 0));
    }
    for step in &plan.steps {
        let (pool, c) = match *step {
            Step::AddC(c) => (ADD_C, c),
            Step::SubC(c) => (SUB_C, c),
            Step::MulC(c) => (MUL_C, c),
            Step::AddV(_) => (ADD_V, 0),
            Step::SubV(_) => (SUB_V, 0),
            other => unreachable!("{other:?} is not generated for word problems"),
        };
        sentences.push(fill(pick(rng, pool), c));
    }
    sentences.push(fill(pick(rng, ASK), 0));
    sentences.join(" ")
}

/// Prompt text for `prog` on `spec`.
///
/// Function tasks list every probe as `f(args)=out`. Word problems state
/// the first probe as a story and leave the answer out.
pub fn summarize(prog: &Program, spec: &TaskSpec) -> String {
    let mut rng = seed::rng(spec.seed, &[seed::label("summarize"), seed::label(spec.family.as_str())]);
    match spec.family {
        TaskFamily::PmpCode => describe_code(&mut rng, prog, spec),
        TaskFamily::DownstreamReason => describe_story(&mut rng, prog, spec),
    }
}

/// Removes `ceil(ratio * words)` contiguous words at a seeded position.
/// `ratio` is clamped to `[0, 1)`.
pub fn clip_description(prompt: &str, ratio: f64, seed: u64) -> String {
    let ratio = if ratio.is_finite() { ratio.clamp(0.0, 0.999_999) } else { 0.0 };
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let cut = ((ratio * words.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if cut == 0 {
        return prompt.to_string();
    }
    let mut rng = seed::rng(seed, &[seed::label("clip")]);
    let at = rng.random_range(0..=words.len() - cut);
    words[..at]
        .iter()
        .chain(&words[at + cut..])
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::gen_task;
    use std::collections::HashSet;

    fn template_words(pools: &[&[&str]]) -> HashSet<String> {
        pools
            .iter()
            .flat_map(|p| p.iter())
            .flat_map(|s| s.split(|c: char| !c.is_ascii_alphabetic() && c != '{' && c != '}'))
            .filter(|w| !w.is_empty() && !w.starts_with('{'))
            .map(|w| w.to_ascii_lowercase())
            .collect()
    }

    #[test]
    fn family_template_vocabularies_are_disjoint() {
        use code_phrases as c;
        use story_phrases as s;
        let code = template_words(&[
            c::HEADER, c::START, c::ADD_C, c::SUB_C, c::MUL_C, c::ADD_V, c::SUB_V, c::MUL_V, c::MOD_C, c::NEG,
            c::SQUARE, c::RSUB_C,
        ]);
        let story = template_words(&[
            s::OPEN, s::FRIEND, s::ADD_C, s::SUB_C, s::MUL_C, s::ADD_V, s::SUB_V, s::ASK, s::NAMES, s::ITEMS,
        ]);
        let shared: Vec<_> = code.intersection(&story).collect();
        assert!(shared.is_empty(), "{shared:?}");
    }

    #[test]
    fn prompt_is_deterministic_and_task_specific() {
        let a = gen_task(TaskFamily::PmpCode, 5);
        let b = gen_task(TaskFamily::PmpCode, 6);
        assert_eq!(summarize(a.reference(), &a), summarize(a.reference(), &a));
        assert_ne!(summarize(a.reference(), &a), summarize(b.reference(), &b));
    }

    #[test]
    fn code_prompt_lists_each_probe_once_and_hides_the_program() {
        for seed in 0..300 {
            let spec = gen_task(TaskFamily::PmpCode, seed);
            let prompt = summarize(spec.reference(), &spec);
            for (args, out) in spec.probe_inputs.iter().zip(&spec.expected_outputs) {
                let probe = format!("f({})={out};", join_args(args));
                let last = format!("f({})={out}.", join_args(args));
                assert_eq!(prompt.matches(&probe).count() + prompt.matches(&last).count(), 1, "{prompt}");
            }
            assert!(!prompt.contains(&spec.reference().to_string()), "{prompt}");
        }
    }

    #[test]
    fn story_prompt_omits_the_answer_sentence() {
        let spec = gen_task(TaskFamily::DownstreamReason, 3);
        let prompt = summarize(spec.reference(), &spec);
        assert!(prompt.ends_with('?'));
        assert!(prompt.contains(&spec.probe_inputs[0][0].to_string()));
    }

    #[test]
    fn clip_examples() {
        let ten = "a b c d e f g h i j";
        assert_eq!(clip_description(ten, 0.0, 1), ten);
        assert_eq!(clip_description(ten, 0.1, 1).split_whitespace().count(), 9);
        assert_eq!(clip_description(ten, 0.1, 4), clip_description(ten, 0.1, 4));
        assert_eq!(clip_description("a b c", 0.5, 2).split_whitespace().count(), 1);
    }

    #[test]
    fn clip_removes_a_contiguous_run() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        for seed in 0..50 {
            let kept: Vec<String> = clip_description(&text, 0.1, seed)
                .split_whitespace()
                .map(str::to_string)
                .collect();
            assert_eq!(kept.len(), 27);
            let gap = kept.iter().zip(&words).position(|(a, b)| a != b).unwrap_or(27);
            assert_eq!(&kept[gap..], &words[gap + 3..]);
        }
    }
}
