use rand::Rng;

use super::params::DECODER;
use super::{Activation, ModelError, ModelParams, NetworkConfig};
use crate::autodiff::{LstmParams, Padding, Tape, Var};
use crate::ctc::ProbSequence;
use crate::mixup::MixPlan;
use crate::tensor::{Tensor, TensorError};

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Identity => x,
    }
}

/// `x ⊙ act(conv(x))` with a depth-preserving 3×3-style same convolution.
pub fn gated_block(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Var,
    activation: Activation,
) -> Result<Var, TensorError> {
    let pre = tape.conv2d(x, kernel, bias, (1, 1), Padding::Same)?;
    let gate = activate(tape, pre, activation);
    tape.mul(x, gate)
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// A configured network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ModelParams,
}

impl Network {
    pub fn new(config: NetworkConfig, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let named = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let params = ModelParams::from_named(&config, named)?;
        Ok(Self { config, params })
    }

    /// Validates `config` and draws fresh Glorot-uniform weights.
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Puts every parameter on the tape as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect()
    }

    /// Puts every parameter on the tape as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Runs the network on `images` (`[B, 1, H, W]`) and returns the
    /// pre-softmax scores `[B, T, C + 1]`.
    ///
    /// With a mixing plan, the representation at `plan.depth` is replaced by
    /// the plan's per-sample convex combination. Dropout is active only
    /// when an RNG is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        images: Var,
        plan: Option<&MixPlan>,
        dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var, ModelError> {
        self.run(tape, params, images, (0, false), None, plan, dropout)
    }

    /// Continues a forward pass from the representation after `from`
    /// convolution layers (and the mixing at that depth). With `from = 0`,
    /// `x` is the raw image batch. Earlier layers are skipped, but `params`
    /// must still list every parameter in order. Dropout is off.
    pub fn resume(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        from: usize,
        plan: Option<&MixPlan>,
    ) -> Result<Var, ModelError> {
        self.run(tape, params, x, (from, true), None, plan, None)
    }

    /// The representation after `upto` convolution layers and the mixing
    /// at that depth, without dropout. Pair with [`Network::resume`].
    pub fn prefix(&self, images: &Tensor, upto: usize, plan: Option<&MixPlan>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let params = self.register_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.run(&mut tape, &params, x, (0, false), Some(upto), plan, None)?;
        Ok(tape.value(out).clone())
    }

    /// `start` is `(layers already applied, whether the input already went
    /// through the mixing at that depth)`.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        (from, premixed): (usize, bool),
        until: Option<usize>,
        plan: Option<&MixPlan>,
        mut dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        if from > c.convs.len() || until.is_some_and(|u| u < from || u > c.convs.len()) {
            return Err(ModelError::InvalidConfig(format!(
                "cannot run layers {from}..{until:?} of {}",
                c.convs.len()
            )));
        }
        if from == 0 {
            let shape = tape.shape(input).to_vec();
            if shape.len() != 4 || shape[1] != 1 || shape[2] != c.input_height {
                return Err(TensorError::ShapeMismatch(format!(
                    "images {shape:?}, expected [B, 1, {}, W]",
                    c.input_height
                ))
                .into());
            }
            c.output_length(shape[3])?;
        }
        let mix_at = match plan {
            Some(p) if p.is_mixing() => {
                let d = p.depth.expect("mixing plans have a depth");
                c.check_depths(&[d])?;
                Some((d, p))
            }
            _ => None,
        };
        let mix = |tape: &mut Tape, x: Var, depth: usize| -> Result<Var, ModelError> {
            match mix_at {
                Some((d, p)) if d == depth => Ok(tape.mix(x, &p.partners, &p.weights)?),
                _ => Ok(x),
            }
        };
        let mut next = params.iter().copied().skip(2 * from);
        let mut take = || next.next().expect("parameter list matches config");

        let mut x = input;
        if from == 0 {
            if !premixed {
                x = mix(tape, x, 0)?;
            }
            if until == Some(0) {
                return Ok(x);
            }
            x = tape.tile(x, c.tiling)?;
        }
        for (k, layer) in c.convs.iter().enumerate().skip(from) {
            let (w, b) = (take(), take());
            x = if layer.gated {
                gated_block(tape, x, w, b, c.gate_activation)?
            } else {
                let pre = tape.conv2d(x, w, b, layer.stride, layer.padding())?;
                activate(tape, pre, c.conv_activation)
            };
            x = mix(tape, x, k + 1)?;
            if until == Some(k + 1) {
                return Ok(x);
            }
        }
        x = tape.max_pool(x, c.pool, (1, 1))?;
        x = tape.to_sequence(x)?;

        for (_, recurrent) in DECODER {
            if let Some(rng) = dropout.as_deref_mut() {
                if c.dropout > 0.0 {
                    let mask = dropout_mask(tape.value(x).len(), c.dropout, rng);
                    x = tape.mask(x, mask)?;
                }
            }
            x = if recurrent {
                let fwd = LstmParams {
                    w_ih: take(),
                    w_hh: take(),
                    bias: take(),
                };
                let bwd = LstmParams {
                    w_ih: take(),
                    w_hh: take(),
                    bias: take(),
                };
                tape.bilstm(x, fwd, bwd)?
            } else {
                let (w, b) = (take(), take());
                tape.linear(x, w, b)?
            };
        }
        let (w, b) = (take(), take());
        Ok(tape.linear(x, w, b)?)
    }

    /// Per-sample output distributions without mixing or dropout.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<ProbSequence>, ModelError> {
        let mut tape = Tape::new();
        let params = self.register_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let logits = self.forward(&mut tape, &params, x, None, None)?;
        Ok(split_logits(tape.value(logits)))
    }
}

/// Softmax of each sample's `[T, C]` block of a `[B, T, C]` score tensor.
pub fn split_logits(logits: &Tensor) -> Vec<ProbSequence> {
    let s = logits.shape();
    let (frames, classes) = (s[1], s[2]);
    logits
        .data()
        .chunks(frames * classes)
        .map(|block| ProbSequence::from_logits(frames, classes, block).expect("sized block"))
        .collect()
}
