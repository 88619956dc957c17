use codepmp::checkpoint::{encode, load_checkpoint, save_checkpoint};
use codepmp::config::{Init, RunConfig};
use codepmp::model::ModelConfig;
use codepmp::pairgen::{generate_pairs, BuildOptions, PairRecord, TaskFamily};
use codepmp::train::{holdout_split, pmp_train, rm_finetune, split_for};
use codepmp::Error;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        d_model: 32,
        n_heads: 2,
        n_layers: 1,
        max_seq_len: 192,
        reward_head: true,
    }
}

fn pairs(family: TaskFamily, n: usize, seed: u64) -> Vec<PairRecord> {
    generate_pairs(&BuildOptions::new(family, n, seed)).unwrap()
}

fn pmp_config() -> RunConfig {
    RunConfig {
        model: small(),
        bs: 8,
        ..RunConfig::desk_pmp()
    }
}

fn rm_config() -> RunConfig {
    RunConfig {
        model: small(),
        bs: 8,
        ..RunConfig::desk_rm()
    }
}

#[test]
fn reruns_are_bit_identical() {
    let data = pairs(TaskFamily::PmpCode, 96, 4);
    let mut cfg = pmp_config();
    cfg.holdout_fraction = 0.1;
    let a = pmp_train(&cfg, &data).unwrap();
    let b = pmp_train(&cfg, &data).unwrap();
    assert_eq!(
        encode(&a.state, Some(&a.optimizer)).unwrap(),
        encode(&b.state, Some(&b.optimizer)).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    cfg.seed = 1;
    let c = pmp_train(&cfg, &data).unwrap();
    assert_ne!(a.state.params, c.state.params);
}

#[test]
fn first_batch_rank_loss_is_ln2_with_a_zero_reward_head() {
    let data = pairs(TaskFamily::PmpCode, 16, 5);
    let out = pmp_train(&pmp_config(), &data).unwrap();
    let first = &out.report.records[0];
    assert!((first.loss.rank_loss - std::f64::consts::LN_2).abs() < 1e-6, "{}", first.loss.rank_loss);
    assert!(first.loss.lm_loss > 4.0);
    assert_eq!(first.lr, 0.0);
}

#[test]
fn rank_loss_falls_over_a_pretraining_run() {
    let data = pairs(TaskFamily::PmpCode, 5000, 6);
    let out = pmp_train(&pmp_config(), &data).unwrap();
    let r = &out.report.records;
    let w = r.len() / 10;
    let mean = |s: &[codepmp::train::StepRecord]| s.iter().map(|x| x.loss.rank_loss).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&r[..w]), mean(&r[r.len() - w..]));
    assert!(tail < head - 0.01, "rank loss {head} -> {tail}");
}

#[test]
fn holdout_never_overlaps_training() {
    for (n, frac, seed) in [(100, 0.1, 0), (5120, 0.2, 2), (7, 0.5, 9)] {
        let (train, hold) = holdout_split(n, frac, seed);
        assert_eq!(train.len() + hold.len(), n);
        assert!(hold.iter().all(|i| train.binary_search(i).is_err()));
    }
    let mut cfg = rm_config();
    cfg.holdout_fraction = 0.2;
    cfg.train_samples = Some(256);
    let (train, hold) = split_for(&cfg, 5120);
    assert_eq!((train.len(), hold.len()), (256, 1024));
    assert!(hold.iter().all(|i| train.binary_search(i).is_err()));
}

#[test]
fn finetuning_leaves_the_lm_head_untouched() {
    let data = pairs(TaskFamily::DownstreamReason, 64, 7);
    let out = rm_finetune(&rm_config(), &data).unwrap();
    let init = codepmp::ModelState::init(small(), 0).unwrap();
    assert_eq!(out.state.tensor("lm_head.w"), init.tensor("lm_head.w"));
    assert_ne!(out.state.tensor("reward.w"), init.tensor("reward.w"));
    assert!(out.report.records.iter().all(|r| r.loss.lm_loss == 0.0));
    assert_eq!(out.report.holdout_size, 6);
}

#[test]
fn pretrained_checkpoints_seed_finetuning() {
    let dir = tempfile::tempdir().unwrap();
    let pmp = pmp_train(&pmp_config(), &pairs(TaskFamily::PmpCode, 32, 8)).unwrap();
    let path = dir.path().join("pmp.ckpt");
    save_checkpoint(&pmp.state, Some(&pmp.optimizer), &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().state, pmp.state);

    let mut cfg = rm_config();
    cfg.init = Init::Checkpoint(path.clone());
    let down = pairs(TaskFamily::DownstreamReason, 40, 9);
    let out = rm_finetune(&cfg, &down).unwrap();
    assert_eq!(out.report.lineage.init, path.display().to_string());
    assert_eq!(out.report.lineage.init_digest.as_ref().unwrap().len(), 64);
    assert_eq!(out.state.step as usize, out.report.records.len());

    cfg.model.d_model = 16;
    assert!(matches!(rm_finetune(&cfg, &down), Err(Error::Load(_))));
    cfg.init = Init::Checkpoint(dir.path().join("missing.ckpt"));
    assert!(matches!(rm_finetune(&cfg, &down), Err(Error::Io { .. })));
}

#[test]
fn stage_mismatch_and_oversized_pairs_are_rejected() {
    let data = pairs(TaskFamily::PmpCode, 8, 1);
    assert!(matches!(pmp_train(&rm_config(), &data), Err(Error::Config(_))));
    let mut cfg = pmp_config();
    cfg.max_length = 20;
    assert!(matches!(pmp_train(&cfg, &data), Err(Error::Input(_))));
    assert!(matches!(pmp_train(&pmp_config(), &[]), Err(Error::Input(_))));
}
