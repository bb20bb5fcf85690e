//! Whole-model gradient audits on the tiny preset.

use std::time::Instant;

use ctcmix_core::data::{assemble_batch, generate_dataset, prepare_lines, GenConfig, PreparedLine};
use ctcmix_core::mixup::MixPlan;
use ctcmix_core::trainer::{gradient_check, GradCheckOptions, linearity_audit, stream_rng, Stream};
use ctcmix_core::{Batch, Network, NetworkConfig};
use rand::Rng;

fn probe(lines: usize, max_len: usize, seed: u64) -> (Network, Vec<PreparedLine>) {
    let g = GenConfig {
        lines: lines * 2,
        val_fraction: 0.4,
        alphabet: "0123456789".into(),
        min_len: 1,
        max_len,
        seed,
        ..GenConfig::default()
    };
    let (tr, _) = generate_dataset(&g).unwrap();
    let cfg = NetworkConfig::tiny(&g.alphabet);
    let vocab = cfg.vocab().unwrap();
    let prepared = prepare_lines(&tr, cfg.input_height, &vocab).unwrap();
    let net = Network::init(cfg, &mut stream_rng(seed, Stream::Init)).unwrap();
    (net, prepared)
}

fn batch_of(lines: &[PreparedLine], n: usize) -> Batch {
    let idx: Vec<usize> = (0..n).collect();
    assemble_batch(lines, &idx, 0)
}

fn plan(batch: usize, depth: usize, pairing: Vec<usize>, lambda: f64) -> MixPlan {
    MixPlan {
        depth: Some(depth),
        partners: vec![pairing],
        weights: vec![vec![lambda, 1.0 - lambda]; batch],
        skipped: vec![false; batch],
    }
}

#[test]
fn finite_differences_agree_without_and_with_mixing() {
    let (net, lines) = probe(2, 2, 7);
    let batch = batch_of(&lines, 2);
    // The default step is 1e-4: smaller steps let rounding noise (about
    // ε·loss/h) swamp gradients near 1e-6. Every fifth entry keeps this
    // test quick; the acceptance suite checks them all.
    let opts = GradCheckOptions {
        stride: 5,
        ..GradCheckOptions::default()
    };
    let start = Instant::now();
    let plain = gradient_check(&net, &batch, &MixPlan::identity(2), true, &opts).unwrap();
    assert!(plain.max_relative_error < 1e-4, "{plain:?}");
    let mixed = plan(2, 4, vec![1, 0], 0.3);
    let report = gradient_check(&net, &batch, &mixed, true, &opts).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
    assert!(plain.parameters * 5 >= net.params.count());
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn mixed_gradients_are_linear_in_the_label_weights() {
    let (net, lines) = probe(4, 3, 9);
    let batch = batch_of(&lines, 4);
    let mut rng = stream_rng(9, Stream::Plan);
    for draw in 0..21 {
        let depth = [0, 4, 8][draw % 3];
        let lambda: f64 = rng.gen();
        let pairing = ctcmix_core::mixup::random_derangement(4, &mut rng);
        let p = plan(4, depth, pairing, lambda);
        let r = linearity_audit(&net, &batch, &p).unwrap();
        assert!(r.loss_error < 1e-10, "draw {draw}: {r:?}");
        assert!(r.grad_error < 1e-10, "draw {draw}: {r:?}");
    }
}

