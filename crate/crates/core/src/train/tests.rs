use super::*;
use crate::encoder::EncoderConfig;
use crate::scoring::TauMode;
use crate::text::{generate_synthetic, SyntheticSpec};

struct Fixture {
    data: TrainData,
    state: TrainState,
}

fn fixture(n_docs: usize, n_viewers: usize, train: TrainConfig) -> Fixture {
    let spec = SyntheticSpec {
        n_docs,
        segments_per_doc: 2,
        vocab_size: 200,
        topic_size: 20,
        segment_len: 6,
        query_len: 4,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let syn = generate_synthetic(&spec).unwrap();
    let vocab = Vocab::build(&syn.corpus, 1000, n_viewers).unwrap();
    let model = DualEncoder::init(EncoderConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_viewers,
        max_len: 24,
        vocab_size: vocab.len(),
        seed: 3,
        ..EncoderConfig::default()
    })
    .unwrap();
    let data = TrainData::prepare(&model, &vocab, &syn.corpus, &syn.train, &train).unwrap();
    let state = TrainState::new(train, vocab, model).unwrap();
    Fixture { data, state }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 3,
        learning_rate: 1e-2,
        hard_negatives_per_query: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_lowers_the_loss() {
    let mut f = fixture(4, 2, small_cfg());
    assert_eq!(f.data.n_examples(), 8);
    let trainer = Trainer::new(&f.data);
    let before = trainer.evaluate_loss(&f.state, 0).unwrap();
    trainer.train_epoch(&mut f.state).unwrap();
    let after = trainer.evaluate_loss(&f.state, 0).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..small_cfg()
    };
    let mut f = fixture(4, 2, cfg);
    let before = f.state.model.clone();
    Trainer::new(&f.data).train_epoch(&mut f.state).unwrap();
    assert_eq!(f.state.model, before);
}

#[test]
fn tau_follows_the_epoch_schedule() {
    let cfg = TrainConfig {
        epochs: 14,
        learning_rate: 0.0,
        ..small_cfg()
    };
    let mut f = fixture(2, 2, cfg);
    let metrics = Trainer::new(&f.data).train(&mut f.state, |_| Ok(())).unwrap();
    assert_eq!(metrics[0].tau, 1.0);
    assert_eq!(metrics[12].tau, (-0.1 * 12.0f64).exp());
    assert_eq!(metrics[13].tau, 0.3);
}

#[test]
fn fixed_tau_is_constant() {
    let mut cfg = small_cfg();
    cfg.loss.tau_mode = TauMode::Fixed { tau: 1.0 };
    let mut f = fixture(2, 2, cfg);
    let metrics = Trainer::new(&f.data).train(&mut f.state, |_| Ok(())).unwrap();
    assert!(metrics.iter().all(|m| m.tau == 1.0));
}

#[test]
fn runs_are_deterministic() {
    let run = || {
        let mut f = fixture(4, 2, small_cfg());
        let m = Trainer::new(&f.data).train(&mut f.state, |_| Ok(())).unwrap();
        (m, f.state.model)
    };
    assert_eq!(run(), run());
}

#[test]
fn batch_size_one_with_in_batch_negatives_is_rejected() {
    let cfg = TrainConfig {
        batch_size: 1,
        ..small_cfg()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut f = fixture(4, 2, small_cfg());
    let trainer = Trainer::new(&f.data);
    trainer.step(&mut f.state).unwrap();
    trainer.step(&mut f.state).unwrap();
    trainer.step(&mut f.state).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&f.state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, f.state);
    assert_eq!(loaded.tau, f.state.config.loss.schedule().temperature_at(loaded.epoch));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");

    let mut a = fixture(4, 2, small_cfg());
    let trainer = Trainer::new(&a.data);
    trainer.step(&mut a.state).unwrap();
    save_checkpoint(&a.state, &path).unwrap();
    let mut straight = Vec::new();
    for _ in 0..3 {
        straight.push(trainer.step(&mut a.state).unwrap().0.loss);
    }

    let mut resumed = load_checkpoint(&path).unwrap();
    let mut replay = Vec::new();
    for _ in 0..3 {
        replay.push(trainer.step(&mut resumed).unwrap().0.loss);
    }
    assert_eq!(straight, replay);
    assert_eq!(resumed, a.state);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let f = fixture(2, 2, small_cfg());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&f.state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(MvrError::Corrupt { .. })));

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(MvrError::Corrupt { .. })));
}

#[test]
fn version_mismatch_is_reported() {
    let f = fixture(2, 2, small_cfg());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&f.state, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, bumped).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(MvrError::Version { expected: 1, found: 99 })
    ));
}

#[test]
fn tied_encoders_share_updates() {
    let spec_cfg = small_cfg();
    let mut f = fixture(4, 2, spec_cfg);
    f.state.model.config.tied = true;
    let q_before = f.state.model.query.clone();
    Trainer::new(&f.data).train_epoch(&mut f.state).unwrap();
    assert_eq!(f.state.model.query, q_before);
    assert_ne!(f.state.model.doc, q_before);
}
