//! Throughput of the hot kernels: convolution, CTC, and one training step
//! of the tiny model with and without mixing.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctcmix_core::autodiff::{Padding, Tape};
use ctcmix_core::ctc::ctc_loss_grad;
use ctcmix_core::data::{assemble_batch, generate_dataset, prepare_lines, GenConfig};
use ctcmix_core::mixup::{make_plan, MixupConfig};
use ctcmix_core::trainer::batch_gradients;
use ctcmix_core::{LabelSequence, MixPlan, Network, NetworkConfig, ProbSequence, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, vec![8, 16, 16, 64]);
    let k = random_tensor(&mut rng, vec![32, 16, 3, 3]);
    let b = random_tensor(&mut rng, vec![32]);
    c.bench_function("conv2d 8x16x16x64 -> 32, 3x3 same, fwd+bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, kv, bv) = (tape.variable(x.clone()), tape.variable(k.clone()), tape.variable(b.clone()));
            let y = tape.conv2d(xv, kv, bv, (1, 1), Padding::Same).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            black_box(tape.grad(kv).unwrap()[0])
        })
    });
}

fn ctc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (frames, classes) = (64, 11);
    let logits: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y = ProbSequence::from_logits(frames, classes, &logits).unwrap();
    let labels = LabelSequence((0..20).map(|_| rng.gen_range(0..10)).collect());
    c.bench_function("ctc loss+grad T=64 S=20 C=10", |bench| {
        bench.iter(|| black_box(ctc_loss_grad(&y, &labels).unwrap().loss))
    });
}

fn training_step(c: &mut Criterion) {
    let g = GenConfig {
        lines: 20,
        val_fraction: 0.5,
        ..GenConfig::default()
    };
    let (lines, _) = generate_dataset(&g).unwrap();
    let cfg = NetworkConfig::tiny(&g.alphabet);
    let vocab = cfg.vocab().unwrap();
    let prepared = prepare_lines(&lines, cfg.input_height, &vocab).unwrap();
    let batch = assemble_batch(&prepared, &(0..8).collect::<Vec<_>>(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::init(cfg, &mut rng).unwrap();
    let mixed = make_plan(8, &mut rng, &MixupConfig::default()).unwrap();
    let mut group = c.benchmark_group("tiny model batch of 8, fwd+bwd");
    group.sample_size(20);
    for (name, plan) in [("no mixing", MixPlan::identity(8)), ("mixing", mixed)] {
        group.bench_function(name, |bench| {
            bench.iter(|| black_box(batch_gradients(&net, &batch, &plan, true, None).unwrap().0.loss))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, ctc, training_step);
criterion_main!(benches);
