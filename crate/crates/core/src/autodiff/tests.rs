use super::*;
use crate::gradcheck::{central_differences, max_relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds `Σ out ⊙ R` for a fixed random projection `R`, so every output
/// element contributes a distinct weight to the scalar being differentiated.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(tape.shape(out).to_vec(), &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(out, r).unwrap();
    tape.sum(p)
}

/// Compares tape gradients of every input against central differences.
fn check_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    step: f64,
    tol: f64,
) -> f64 {
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = project(&mut tape, out, 99);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).unwrap().to_vec();
        let numeric = central_differences(input.data(), step, |x| {
            let mut perturbed = inputs.to_vec();
            perturbed[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (t, _, l) = eval(&perturbed);
            t.value(l).data()[0]
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "input {k}: relative error {err:e}");
        worst = worst.max(err);
    }
    worst
}

#[test]
fn elementwise_values() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

    let x = tape.constant(Tensor::scalar(4.0));
    let y = tape.constant(Tensor::scalar(8.0));
    let xs = tape.scale(x, 0.25);
    let ys = tape.scale(y, 0.75);
    let m = tape.add(xs, ys).unwrap();
    assert_eq!(tape.value(m).data(), &[7.0]);
}

#[test]
fn elementwise_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2]));
    let b = tape.constant(Tensor::zeros(vec![3]));
    assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch(_))));
    assert!(matches!(tape.mul(a, b), Err(TensorError::ShapeMismatch(_))));
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::scalar(2.0));
    let b = tape.variable(Tensor::scalar(5.0));
    let p = tape.mul(a, b).unwrap();
    tape.backward(p).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[5.0]);
    assert_eq!(tape.grad(b).unwrap(), &[2.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::zeros(vec![2]));
    assert!(matches!(tape.backward(a), Err(TensorError::NotScalar(_))));
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::scalar(3.0));
    let sq = tape.mul(a, a).unwrap();
    tape.backward(sq).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[12.0]);
    tape.zero_grads();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[6.0]);
}

#[test]
fn weighted_loss_sum_is_weighted_gradient_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random(vec![3, 4], &mut rng);
    let x = random(vec![2, 4], &mut rng);
    let lambda = 0.37;
    let grads_of = |which: Option<usize>| {
        let mut tape = Tape::new();
        let wv = tape.variable(w.clone());
        let xv = tape.constant(x.clone());
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.linear(xv, wv, b).unwrap();
        let t = tape.tanh(y);
        let l1 = project(&mut tape, t, 1);
        let l2 = project(&mut tape, t, 2);
        let loss = match which {
            Some(1) => l1,
            Some(_) => l2,
            None => {
                let a = tape.scale(l1, lambda);
                let c = tape.scale(l2, 1.0 - lambda);
                tape.add(a, c).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(wv).unwrap().to_vec()
    };
    let mixed = grads_of(None);
    let g1 = grads_of(Some(1));
    let g2 = grads_of(Some(2));
    for i in 0..mixed.len() {
        let expected = lambda * g1[i] + (1.0 - lambda) * g2[i];
        assert!((mixed[i] - expected).abs() <= 1e-14 * expected.abs().max(1.0));
    }
}

#[test]
fn activation_values() {
    let mut tape = Tape::new();
    let z = tape.variable(Tensor::from_vec(vec![0.0, 0.0]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    let sm = tape.softmax(z);
    assert_eq!(tape.value(sm).data(), &[0.5, 0.5]);

    let mut tape = Tape::new();
    let z = tape.variable(Tensor::scalar(0.0));
    let t = tape.tanh(z);
    tape.backward(t).unwrap();
    assert_eq!(tape.grad(z).unwrap(), &[1.0]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(vec![4, 5, 7], &mut rng).scale(30.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.softmax(v);
    for row in tape.value(s).data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(vec![2, 3, 5], &mut rng);
    check_gradients(&[x.clone()], |t, v| t.sigmoid(v[0]), 1e-6, 1e-5);
    check_gradients(&[x.clone()], |t, v| t.tanh(v[0]), 1e-6, 1e-5);
    check_gradients(&[x], |t, v| t.softmax(v[0]), 1e-6, 1e-5);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(vec![2, 1, 3, 4], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(xv, k, b, (1, 1), Padding::Valid).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_sum_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, k, b, (1, 1), Padding::Valid).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[10.0]);
}

#[test]
fn conv_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(vec![3, 1, 3, 3]));
    let b = tape.constant(Tensor::zeros(vec![3]));
    assert!(matches!(
        tape.conv2d(x, k, b, (1, 1), Padding::Same),
        Err(TensorError::ShapeMismatch(_))
    ));
    let k = tape.constant(Tensor::zeros(vec![3, 2, 5, 3]));
    assert!(matches!(
        tape.conv2d(x, k, b, (1, 1), Padding::Valid),
        Err(TensorError::EmptyOutput(_))
    ));
}

#[test]
fn conv_gradients_same_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(vec![1, 4, 8, 16], &mut rng);
    let k = random(vec![8, 4, 3, 3], &mut rng);
    let b = random(vec![8], &mut rng);
    check_gradients(
        &[x, k, b],
        |t, v| t.conv2d(v[0], v[1], v[2], (1, 1), Padding::Same).unwrap(),
        1e-6,
        1e-5,
    );
}

#[test]
fn conv_gradients_strided_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(vec![2, 3, 8, 10], &mut rng);
    let k = random(vec![5, 3, 4, 2], &mut rng);
    let b = random(vec![5], &mut rng);
    check_gradients(
        &[x, k, b],
        |t, v| t.conv2d(v[0], v[1], v[2], (4, 2), Padding::Valid).unwrap(),
        1e-6,
        1e-5,
    );
}

#[test]
fn max_pool_vertical_collapse_and_routing() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1, 1, 4, 1], vec![1.0, 9.0, 2.0, 3.0]).unwrap());
    let y = tape.max_pool(x, (4, 1), (1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[9.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_tie_routes_to_lowest_index() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![1, 1, 4, 1], vec![2.0; 4]).unwrap());
    let y = tape.max_pool(x, (4, 1), (1, 1)).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn max_pool_window_too_large() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 2]));
    assert!(matches!(
        tape.max_pool(x, (4, 1), (1, 1)),
        Err(TensorError::EmptyOutput(_))
    ));
}

#[test]
fn max_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(vec![2, 3, 4, 5], &mut rng);
    check_gradients(&[x], |t, v| t.max_pool(v[0], (4, 1), (1, 1)).unwrap(), 1e-6, 1e-5);
}

#[test]
fn tile_layout_and_gradients() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let x = tape.constant(Tensor::new(vec![1, 1, 4, 4], data).unwrap());
    let y = tape.tile(x, (2, 2)).unwrap();
    assert_eq!(tape.shape(y), &[1, 4, 2, 2]);
    // channel dy*2+dx holds x[2y+dy][2x+dx]
    assert_eq!(&tape.value(y).data()[0..4], &[0.0, 2.0, 8.0, 10.0]);
    assert_eq!(&tape.value(y).data()[4..8], &[1.0, 3.0, 9.0, 11.0]);
    assert_eq!(&tape.value(y).data()[12..16], &[5.0, 7.0, 13.0, 15.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(vec![2, 1, 6, 7], &mut rng);
    check_gradients(&[x], |t, v| t.tile(v[0], (2, 2)).unwrap(), 1e-6, 1e-5);
}

#[test]
fn sequence_linear_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(vec![2, 3, 1, 5], &mut rng);
    let w = random(vec![4, 3], &mut rng);
    let b = random(vec![4], &mut rng);
    check_gradients(
        &[x, w, b],
        |t, v| {
            let s = t.to_sequence(v[0]).unwrap();
            let l = t.linear(s, v[1], v[2]).unwrap();
            t.concat_last(s, l).unwrap()
        },
        1e-6,
        1e-5,
    );
}

#[test]
fn mix_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(vec![3, 2, 2, 3], &mut rng);
    let partners = vec![vec![1, 2, 0]];
    let weights = vec![vec![0.3, 0.7], vec![1.0, 0.0], vec![0.5, 0.5]];
    check_gradients(
        &[x],
        |t, v| t.mix(v[0], &partners, &weights).unwrap(),
        1e-6,
        1e-5,
    );
}

#[test]
fn mix_with_unit_weight_is_exact_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(vec![2, 5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let m = tape
        .mix(v, &[vec![1, 0]], &[vec![1.0, 0.0], vec![1.0, 0.0]])
        .unwrap();
    assert_eq!(tape.value(m), &x);
}

#[test]
fn lstm_zero_weights_give_zero_output() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = tape.constant(random(vec![2, 4, 3], &mut rng));
    let p = LstmParams {
        w_ih: tape.constant(Tensor::zeros(vec![8, 3])),
        w_hh: tape.constant(Tensor::zeros(vec![8, 2])),
        bias: tape.constant(Tensor::zeros(vec![8])),
    };
    let y = tape.bilstm(x, p, p).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_step_is_one_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (d, h) = (3, 2);
    let x = random(vec![1, 1, d], &mut rng);
    let wih = random(vec![4 * h, d], &mut rng);
    let whh = random(vec![4 * h, h], &mut rng);
    let bias = random(vec![4 * h], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = LstmParams {
        w_ih: tape.constant(wih.clone()),
        w_hh: tape.constant(whh),
        bias: tape.constant(bias.clone()),
    };
    let y = tape.lstm(xv, p, false).unwrap();
    for j in 0..h {
        let pre = |gate: usize| {
            let r = gate * h + j;
            bias.data()[r] + (0..d).map(|c| wih.data()[r * d + c] * x.data()[c]).sum::<f64>()
        };
        let i = sigmoid(pre(0));
        let g = pre(2).tanh();
        let o = sigmoid(pre(3));
        let expected = o * (i * g).tanh();
        assert!((tape.value(y).data()[j] - expected).abs() < 1e-15);
    }
}

#[test]
fn lstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (d, h) = (4, 4);
    let x = random(vec![1, 3, d], &mut rng);
    let fw = [
        random(vec![4 * h, d], &mut rng),
        random(vec![4 * h, h], &mut rng),
        random(vec![4 * h], &mut rng),
    ];
    let bw = [
        random(vec![4 * h, d], &mut rng),
        random(vec![4 * h, h], &mut rng),
        random(vec![4 * h], &mut rng),
    ];
    let inputs = vec![
        x,
        fw[0].clone(),
        fw[1].clone(),
        fw[2].clone(),
        bw[0].clone(),
        bw[1].clone(),
        bw[2].clone(),
    ];
    check_gradients(
        &inputs,
        |t, v| {
            let f = LstmParams {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
            };
            let b = LstmParams {
                w_ih: v[4],
                w_hh: v[5],
                bias: v[6],
            };
            t.bilstm(v[0], f, b).unwrap()
        },
        1e-6,
        1e-5,
    );
}

#[test]
fn lstm_batched_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (d, h) = (3, 2);
    let inputs = vec![
        random(vec![3, 5, d], &mut rng),
        random(vec![4 * h, d], &mut rng),
        random(vec![4 * h, h], &mut rng),
        random(vec![4 * h], &mut rng),
    ];
    check_gradients(
        &inputs,
        |t, v| {
            let p = LstmParams {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
            };
            t.lstm(v[0], p, true).unwrap()
        },
        1e-6,
        1e-5,
    );
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let x = tape.variable(random(vec![1, 2, 4, 6], &mut rng));
        let k = tape.variable(random(vec![3, 2, 3, 3], &mut rng));
        let b = tape.variable(random(vec![3], &mut rng));
        let y = tape.conv2d(x, k, b, (1, 1), Padding::Same).unwrap();
        let s = tape.sigmoid(y);
        let l = project(&mut tape, s, 4);
        tape.backward(l).unwrap();
        (
            tape.value(l).data().to_vec(),
            tape.grad(x).unwrap().to_vec(),
            tape.grad(k).unwrap().to_vec(),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn gradient_additivity() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(vec![6], &mut rng);
    let single = |seed| {
        let mut tape = Tape::new();
        let v = tape.variable(x.clone());
        let t = tape.tanh(v);
        let l = project(&mut tape, t, seed);
        tape.backward(l).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let t = tape.tanh(v);
    let l1 = project(&mut tape, t, 1);
    let l2 = project(&mut tape, t, 2);
    let l = tape.add(l1, l2).unwrap();
    tape.backward(l).unwrap();
    let (g1, g2) = (single(1), single(2));
    for (i, g) in tape.grad(v).unwrap().iter().enumerate() {
        assert!((g - (g1[i] + g2[i])).abs() < 1e-14);
    }
}
