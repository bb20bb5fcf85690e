//! End-to-end properties of the training loop on small synthetic sets.

use ctcmix_core::data::{generate_dataset, prepare_lines, GenConfig, PreparedLine};
use ctcmix_core::mixup::{LambdaDistribution, MixupConfig};
use ctcmix_core::model::load_checkpoint;
use ctcmix_core::trainer::{
    evaluate, evaluate_prepared, make_batches, train, TrainConfig, BEST_CHECKPOINT,
    LAST_CHECKPOINT, TRAINLOG,
};
use ctcmix_core::NetworkConfig;

fn small_sets(lines: usize, seed: u64) -> (Vec<PreparedLine>, Vec<PreparedLine>, NetworkConfig) {
    let g = GenConfig {
        lines,
        max_len: 6,
        seed,
        ..GenConfig::default()
    };
    let (tr, va) = generate_dataset(&g).unwrap();
    let net = NetworkConfig::tiny(&g.alphabet);
    let vocab = net.vocab().unwrap();
    (
        prepare_lines(&tr, net.input_height, &vocab).unwrap(),
        prepare_lines(&va, net.input_height, &vocab).unwrap(),
        net,
    )
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_reproduce_the_log_and_weights() {
    let (tr, va, net) = small_sets(44, 1);
    let cfg = TrainConfig {
        mixup: MixupConfig::default(),
        ..quick(3)
    };
    let a = train(&tr, &va, net.clone(), &cfg, None, &mut |_| {}).unwrap();
    let b = train(&tr, &va, net, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(a.log.without_time(), b.log.without_time());
    assert_eq!(a.best, b.best);
    assert_eq!(a.log.records.len(), 3);
    assert!(a.log.records.iter().any(|r| r.lambda_mean < 1.0));
}

#[test]
fn lambda_one_matches_training_without_mixup() {
    let (tr, va, net) = small_sets(44, 2);
    let off = train(&tr, &va, net.clone(), &quick(3), None, &mut |_| {}).unwrap();
    let forced = TrainConfig {
        mixup: MixupConfig {
            distribution: LambdaDistribution::Fixed(1.0),
            ..MixupConfig::default()
        },
        ..quick(3)
    };
    let on = train(&tr, &va, net, &forced, None, &mut |_| {}).unwrap();
    for (x, y) in off.log.records.iter().zip(&on.log.records) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        assert_eq!(x.val_cer, y.val_cer);
    }
    assert_eq!(off.best, on.best);
}

#[test]
fn checkpoint_reload_reproduces_the_report() {
    let (tr, va, net) = small_sets(44, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tr, &va, net, &quick(2), Some(dir.path()), &mut |_| {}).unwrap();
    for f in [BEST_CHECKPOINT, LAST_CHECKPOINT, TRAINLOG] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let tsv = std::fs::read_to_string(dir.path().join(TRAINLOG)).unwrap();
    assert_eq!(tsv, out.log.to_tsv());
    let loaded = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(loaded, out.best);
    let before = evaluate_prepared(&out.best, &va, 8).unwrap();
    let after = evaluate_prepared(&loaded, &va, 8).unwrap();
    assert_eq!(before, after);
    assert_eq!(after, evaluate_prepared(&loaded, &va, 8).unwrap());
    let report_cer = out.log.best().unwrap().val_cer;
    assert_eq!(before.cer, report_cer);
}

#[test]
fn evaluation_rejects_foreign_characters() {
    let g = GenConfig {
        lines: 22,
        alphabet: "abc".into(),
        max_len: 4,
        ..GenConfig::default()
    };
    let (_, va) = generate_dataset(&g).unwrap();
    let net = ctcmix_core::Network::init(
        NetworkConfig::tiny("0123456789"),
        &mut ctcmix_core::trainer::stream_rng(0, ctcmix_core::trainer::Stream::Init),
    )
    .unwrap();
    let err = evaluate(&net, &va, 8).unwrap_err();
    assert!(matches!(err, ctcmix_core::TrainError::ConfigMismatch(_)), "{err}");
}

#[test]
fn untrained_model_is_near_chance() {
    let (_, va, net) = small_sets(220, 4);
    let net = ctcmix_core::Network::init(
        net,
        &mut ctcmix_core::trainer::stream_rng(4, ctcmix_core::trainer::Stream::Init),
    )
    .unwrap();
    let r = evaluate_prepared(&net, &va, 8).unwrap();
    assert!(r.cer > 0.8, "cer {}", r.cer);
}

#[test]
fn batches_cover_every_line_once() {
    let (tr, _, _) = small_sets(110, 5);
    let batches = make_batches(&tr, 8).unwrap();
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..tr.len()).collect::<Vec<_>>());
}
