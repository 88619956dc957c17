use codepmp::gradcheck::fixture_params;
use codepmp::model::{forward_lm, forward_reward, ModelConfig, ModelState, Packed, TokenSequence, Transformer};
use codepmp::tokenizer::{Tokenizer, PAD};
use codepmp::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        max_seq_len: 48,
        reward_head: true,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn packed_pair_scores_equal_separate_sequences() {
    let model = Transformer::new(tiny()).unwrap();
    let params = fixture_params(&tiny(), 5).unwrap();
    let t = Tokenizer;
    let prompt = t.prompt_ids("def f(x): add 2");
    let chosen = t.response_ids("x 2 +", false);
    let rejected = t.response_ids("x 3 + neg", false);
    let (packed, rows) = Packed::pair(&prompt, &chosen, &rejected);
    let (sc, sr) = model.score_pair(&params, &packed, &rows).unwrap();
    let join = |r: &[u32]| [prompt.as_slice(), r].concat();
    assert!(close(sc, model.score(&params, &join(&chosen)).unwrap()));
    assert!(close(sr, model.score(&params, &join(&rejected)).unwrap()));

    let extra = t.response_ids("x", false);
    let (fan, last) = Packed::fanout(&prompt, &[&chosen, &rejected, &extra]).unwrap();
    let scores = model.score_fanout(&params, &fan, &last).unwrap();
    assert!(close(scores[0], sc) && close(scores[1], sr));
    assert!(close(scores[2], model.score(&params, &join(&extra)).unwrap()));
}

#[test]
fn packed_logits_match_the_plain_chosen_sequence() {
    let model = Transformer::new(tiny()).unwrap();
    let params = fixture_params(&tiny(), 6).unwrap();
    let t = Tokenizer;
    let prompt = t.prompt_ids("q");
    let chosen = t.response_ids("ab", false);
    let rejected = t.response_ids("zz", false);
    let (packed, rows) = Packed::pair(&prompt, &chosen, &rejected);
    let trace = model.forward(&params, &packed).unwrap();
    let target_rows: Vec<usize> = rows.chosen_targets.iter().map(|r| r.0).collect();
    let packed_logits = model.logits(&params, &trace, &target_rows);
    let plain = [prompt.clone(), chosen.clone()].concat();
    let plain_trace = model.forward(&params, &Packed::single(&plain)).unwrap();
    let plain_rows: Vec<usize> = (prompt.len() - 1..plain.len() - 1).collect();
    let plain_logits = model.logits(&params, &plain_trace, &plain_rows);
    assert_eq!(packed_logits.len(), plain_logits.len());
    for (a, b) in packed_logits.iter().zip(&plain_logits) {
        assert!(close(*a, *b));
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let model = Transformer::new(tiny()).unwrap();
    let params = vec![0.0f32; model.layout().total()];
    assert!(matches!(model.score(&params, &[260]), Err(Error::Input(_))));
    assert!(matches!(model.score(&params, &vec![1; 49]), Err(Error::Input(_))));
    assert!(matches!(model.forward(&params, &Packed::single(&[])), Err(Error::Input(_))));
    assert!(Packed::fanout(&[1], &[]).is_err());

    let headless = Transformer::new(ModelConfig { reward_head: false, ..tiny() }).unwrap();
    let p = vec![0.0f32; headless.layout().total()];
    assert!(matches!(headless.score(&p, &[1, 2]), Err(Error::Capability(_))));

    let bad = ModelConfig { n_heads: 3, ..tiny() };
    assert!(matches!(Transformer::new(bad), Err(Error::Config(_))));
}

#[test]
fn init_is_seeded_and_reward_head_starts_at_zero() {
    let a = ModelState::init(tiny(), 1).unwrap();
    assert_eq!(a, ModelState::init(tiny(), 1).unwrap());
    assert_ne!(a.params, ModelState::init(tiny(), 2).unwrap().params);
    assert!(a.tensor("reward.w").unwrap().iter().all(|&w| w == 0.0));
    assert!(a.tensor("layers.1.ln2.g").unwrap().iter().all(|&g| g == 1.0));
    let seq = TokenSequence::from_ids(vec![5, 6, 7]).unwrap();
    assert_eq!(forward_reward(&a, &seq).unwrap(), 0.0);
}

#[test]
fn batch_logits_ignore_padding_after_the_valid_prefix() {
    let state = ModelState::init(tiny(), 4).unwrap();
    let short = TokenSequence::from_ids(vec![1, 2, 3]).unwrap();
    let padded = short.padded(6, PAD);
    let long = TokenSequence::from_ids(vec![9, 8, 7, 6, 5, 4]).unwrap();
    let out = forward_lm(&state, &[padded, long]).unwrap();
    assert_eq!((out.batch, out.seq_len, out.vocab), (2, 6, 260));
    let alone = forward_lm(&state, &[short]).unwrap();
    for t in 0..3 {
        assert_eq!(out.row(0, t), alone.row(0, t));
    }
    assert_eq!(
        forward_reward(&state, &TokenSequence::new(vec![1, 2, 3, PAD], 3).unwrap()).unwrap(),
        forward_reward(&state, &TokenSequence::from_ids(vec![1, 2, 3]).unwrap()).unwrap()
    );
}
