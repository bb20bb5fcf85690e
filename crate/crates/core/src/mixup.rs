//! Manifold mixup for CTC-trained models.
//!
//! A [`MixPlan`] pairs every sample of a mini-batch with a partner, assigns
//! each sample a mixing ratio λ and picks one network depth for the whole
//! batch. Features at that depth become `λ·h(x_i) + (1 − λ)·h(x_j)` and the
//! loss becomes `λ·L(ŷ, l_i) + (1 − λ)·L(ŷ, l_j)`: label sequences of
//! different lengths cannot be interpolated, but losses can.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::ctc::{ctc_loss_grad, CtcError, CtcOutput, LabelSequence, ProbSequence};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixupError {
    #[error("mixup needs at least 2 samples per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid mixup configuration: {0}")]
    InvalidConfig(String),
}

/// Distribution of the mixing ratio λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaDistribution {
    /// Symmetric Beta(α, α).
    Beta { alpha: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Always the same λ; used to pin the endpoints in tests and audits.
    Fixed(f64),
}

impl Default for LambdaDistribution {
    fn default() -> Self {
        LambdaDistribution::Beta { alpha: 0.5 }
    }
}

impl LambdaDistribution {
    pub fn validate(&self) -> Result<(), MixupError> {
        match *self {
            LambdaDistribution::Beta { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(
                MixupError::InvalidConfig(format!("beta alpha must be positive, got {alpha}")),
            ),
            LambdaDistribution::Uniform { lo, hi } if !(0.0 <= lo && lo < hi && hi <= 1.0) => {
                Err(MixupError::InvalidConfig(format!(
                    "uniform bounds need 0 <= lo < hi <= 1, got [{lo}, {hi}]"
                )))
            }
            LambdaDistribution::Fixed(v) if !(0.0..=1.0).contains(&v) => Err(
                MixupError::InvalidConfig(format!("fixed lambda must lie in [0, 1], got {v}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LambdaDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaDistribution::Beta { alpha } => write!(f, "beta:{alpha}"),
            LambdaDistribution::Uniform { lo, hi } => write!(f, "uniform:{lo}:{hi}"),
            LambdaDistribution::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for LambdaDistribution {
    type Err = MixupError;

    /// Accepts `beta`, `beta:<alpha>`, `uniform`, `uniform:<lo>:<hi>` and
    /// `fixed:<lambda>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MixupError::InvalidConfig(format!("cannot parse lambda distribution {s:?}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let dist = match parts.as_slice() {
            ["beta"] => LambdaDistribution::Beta { alpha: 0.5 },
            ["beta", a] => LambdaDistribution::Beta { alpha: num(a)? },
            ["uniform"] => LambdaDistribution::Uniform { lo: 0.0, hi: 1.0 },
            ["uniform", lo, hi] => LambdaDistribution::Uniform {
                lo: num(lo)?,
                hi: num(hi)?,
            },
            ["fixed", v] => LambdaDistribution::Fixed(num(v)?),
            _ => return Err(bad()),
        };
        dist.validate()?;
        Ok(dist)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupConfig {
    pub enabled: bool,
    pub distribution: LambdaDistribution,
    /// Mixable depths: 0 is the preprocessed input, `k` the output of the
    /// k-th convolutional layer.
    pub positions: Vec<usize>,
    /// 2 for pairs, 3 for triples.
    pub n_way: usize,
    /// Weight each CTC term by its mixing ratio; otherwise sum them.
    pub multiply_gradients: bool,
    /// Adds "no fusion" as an outcome of the per-batch depth draw.
    pub allow_no_fusion: bool,
    pub no_fusion_probability: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            distribution: LambdaDistribution::default(),
            positions: vec![0, 4, 8],
            n_way: 2,
            multiply_gradients: true,
            allow_no_fusion: false,
            no_fusion_probability: 0.25,
        }
    }
}

impl MixupConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MixupError> {
        self.distribution.validate()?;
        if !(2..=3).contains(&self.n_way) {
            return Err(MixupError::InvalidConfig(format!(
                "n_way must be 2 or 3, got {}",
                self.n_way
            )));
        }
        if self.enabled && self.positions.is_empty() {
            return Err(MixupError::InvalidConfig(
                "at least one mix position is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.no_fusion_probability) {
            return Err(MixupError::InvalidConfig(format!(
                "no-fusion probability must lie in [0, 1), got {}",
                self.no_fusion_probability
            )));
        }
        Ok(())
    }
}

/// Beta(½, ½) by inverse transform: `λ = sin²(πU/2)`.
pub fn beta_half_from_uniform(u: f64) -> f64 {
    let s = (PI * u / 2.0).sin();
    (s * s).clamp(0.0, 1.0)
}

/// CDF of Beta(½, ½), the arcsine law: `(2/π)·arcsin(√x)`.
pub fn arcsine_cdf(x: f64) -> f64 {
    2.0 / PI * x.clamp(0.0, 1.0).sqrt().asin()
}

fn gamma_draw<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
}

/// Draws one λ ∈ [0, 1].
pub fn sample_lambda<R: Rng + ?Sized>(rng: &mut R, dist: &LambdaDistribution) -> f64 {
    match *dist {
        LambdaDistribution::Beta { alpha } if alpha == 0.5 => beta_half_from_uniform(rng.gen()),
        LambdaDistribution::Beta { alpha } => {
            let x = gamma_draw(rng, alpha);
            let y = gamma_draw(rng, alpha);
            if x + y == 0.0 {
                0.5
            } else {
                x / (x + y)
            }
        }
        LambdaDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.gen::<f64>(),
        LambdaDistribution::Fixed(v) => v,
    }
}

/// Mixing weights for one sample, own weight first.
///
/// Pairs use `[λ, 1 − λ]`. Triples use symmetric Dirichlet(α) weights for
/// Beta(α), Dirichlet(1) for uniform, and `[λ, (1 − λ)/2, (1 − λ)/2]` for a
/// fixed λ.
pub fn sample_weights<R: Rng + ?Sized>(
    rng: &mut R,
    dist: &LambdaDistribution,
    n_way: usize,
) -> Vec<f64> {
    if n_way == 2 {
        let l = sample_lambda(rng, dist);
        return vec![l, 1.0 - l];
    }
    let alpha = match *dist {
        LambdaDistribution::Beta { alpha } => alpha,
        LambdaDistribution::Uniform { .. } => 1.0,
        LambdaDistribution::Fixed(l) => {
            let rest = (1.0 - l) / (n_way - 1) as f64;
            let mut w = vec![rest; n_way];
            w[0] = l;
            return w;
        }
    };
    let draws: Vec<f64> = (0..n_way).map(|_| gamma_draw(rng, alpha)).collect();
    let total: f64 = draws.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n_way as f64; n_way];
    }
    draws.iter().map(|d| d / total).collect()
}

/// Uniformly random permutation without fixed points (rejection sampling).
pub fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Per-batch mixing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    /// Depth at which features are mixed; `None` means no fusion.
    pub depth: Option<usize>,
    /// One permutation per extra mixing partner (empty when not mixing).
    pub partners: Vec<Vec<usize>>,
    /// Per-sample weights, own weight first, `partners.len() + 1` entries.
    pub weights: Vec<Vec<f64>>,
    /// Samples whose mix was altered because a label could not be aligned.
    pub skipped: Vec<bool>,
}

impl MixPlan {
    /// Plain forward: no fusion, every λ = 1.
    pub fn identity(batch: usize) -> Self {
        Self {
            depth: None,
            partners: Vec::new(),
            weights: vec![vec![1.0]; batch],
            skipped: vec![false; batch],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.weights.len()
    }

    pub fn is_mixing(&self) -> bool {
        self.depth.is_some() && !self.partners.is_empty()
    }

    /// The first pairing permutation, if any.
    pub fn pairing(&self) -> Option<&[usize]> {
        self.partners.first().map(Vec::as_slice)
    }

    /// Own weight of every sample (λ).
    pub fn lambdas(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w[0]).collect()
    }

    /// `(sample index, weight)` for every component of sample `b`.
    pub fn components(&self, b: usize) -> Vec<(usize, f64)> {
        self.weights[b]
            .iter()
            .enumerate()
            .map(|(m, &w)| (if m == 0 { b } else { self.partners[m - 1][b] }, w))
            .collect()
    }

    /// Samples whose every component is unalignable; they carry no loss.
    pub fn dropped(&self, b: usize) -> bool {
        self.weights[b].iter().all(|&w| w == 0.0)
    }

    /// Unmixes components whose labels cannot be aligned in `frames` frames:
    /// their weight moves to the feasible components. Returns how many
    /// samples were altered.
    pub fn resolve_feasibility(&mut self, labels: &[LabelSequence], frames: usize) -> usize {
        let mut altered = 0;
        for b in 0..self.batch_size() {
            let comps = self.components(b);
            let feasible: Vec<bool> = comps.iter().map(|&(j, _)| labels[j].fits(frames)).collect();
            if feasible.iter().all(|&f| f) {
                continue;
            }
            altered += 1;
            self.skipped[b] = true;
            self.weights[b] = rebalance(&self.weights[b], &feasible);
        }
        altered
    }
}

/// Zeroes infeasible weights and renormalises the rest; when the feasible
/// components had no weight at all they share it equally.
fn rebalance(weights: &[f64], feasible: &[bool]) -> Vec<f64> {
    let kept: f64 = weights
        .iter()
        .zip(feasible)
        .filter(|(_, &f)| f)
        .map(|(w, _)| w)
        .sum();
    let n_ok = feasible.iter().filter(|&&f| f).count();
    weights
        .iter()
        .zip(feasible)
        .map(|(&w, &f)| match (f, kept > 0.0) {
            (false, _) => 0.0,
            (true, true) => w / kept,
            (true, false) => 1.0 / n_ok as f64,
        })
        .collect()
}

/// Draws the depth, partner permutations and weights for one batch.
///
/// Draw order on `rng`: depth, then each permutation, then weights per
/// sample.
pub fn make_plan<R: Rng + ?Sized>(
    batch_size: usize,
    rng: &mut R,
    config: &MixupConfig,
) -> Result<MixPlan, MixupError> {
    if !config.enabled {
        return Ok(MixPlan::identity(batch_size));
    }
    config.validate()?;
    if batch_size < 2 {
        return Err(MixupError::BatchTooSmall(batch_size));
    }
    if config.allow_no_fusion && rng.gen::<f64>() < config.no_fusion_probability {
        return Ok(MixPlan::identity(batch_size));
    }
    let depth = config.positions[rng.gen_range(0..config.positions.len())];
    let partners: Vec<Vec<usize>> = (1..config.n_way)
        .map(|_| random_derangement(batch_size, rng))
        .collect();
    let weights = (0..batch_size)
        .map(|_| sample_weights(rng, &config.distribution, config.n_way))
        .collect();
    Ok(MixPlan {
        depth: Some(depth),
        partners,
        weights,
        skipped: vec![false; batch_size],
    })
}

/// `λ·h_i + (1 − λ)·h_j` on plain tensors.
pub fn interpolate_features(h_i: &Tensor, h_j: &Tensor, lambda: f64) -> Result<Tensor, TensorError> {
    h_i.scale(lambda).add(&h_j.scale(1.0 - lambda))
}

/// Weighted sum of several same-shape feature maps (3-way fusion).
pub fn interpolate_many(features: &[&Tensor], weights: &[f64]) -> Result<Tensor, TensorError> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| TensorError::ShapeMismatch("no features to interpolate".into()))?;
    if weights.len() != features.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} weights for {} feature maps",
            weights.len(),
            features.len()
        )));
    }
    let mut out = first.scale(weights[0]);
    for (h, &w) in rest.iter().zip(&weights[1..]) {
        out = out.add(&h.scale(w))?;
    }
    Ok(out)
}

/// Differentiable `λ·h_i + (1 − λ)·h_j`.
pub fn interpolate_features_taped(
    tape: &mut Tape,
    h_i: Var,
    h_j: Var,
    lambda: f64,
) -> Result<Var, TensorError> {
    let a = tape.scale(h_i, lambda);
    let b = tape.scale(h_j, 1.0 - lambda);
    tape.add(a, b)
}

/// Result of a mixed CTC evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLoss {
    pub loss: f64,
    pub grad_probs: Vec<f64>,
    pub grad_logits: Vec<f64>,
    /// Weights actually applied to each label after any fallback.
    pub weights: Vec<f64>,
    /// A label could not be aligned and its weight moved elsewhere.
    pub skipped: bool,
}

/// `Σ_m w_m·L_ctc(ŷ, l_m)` with gradients, or the unweighted sum over the
/// active labels when `multiply_gradients` is false.
///
/// Labels with zero weight are not evaluated. Unalignable labels are dropped
/// and their weight handed to the alignable ones; only when no label can be
/// aligned does this fail.
pub fn mixed_ctc_loss(
    y: &ProbSequence,
    labels: &[&LabelSequence],
    weights: &[f64],
    multiply_gradients: bool,
) -> Result<MixedLoss, CtcError> {
    assert_eq!(labels.len(), weights.len(), "one weight per label");
    let feasible: Vec<bool> = labels.iter().map(|l| l.fits(y.frames())).collect();
    let skipped = feasible.iter().any(|&f| !f);
    if !feasible.iter().any(|&f| f) {
        let worst = labels
            .iter()
            .max_by_key(|l| l.min_frames())
            .expect("at least one label");
        return Err(CtcError::InfeasibleAlignment {
            labels: worst.len(),
            min_frames: worst.min_frames(),
            frames: y.frames(),
        });
    }
    let weights = if skipped {
        rebalance(weights, &feasible)
    } else {
        weights.to_vec()
    };
    let n = y.probs().len();
    let mut out = MixedLoss {
        loss: 0.0,
        grad_probs: vec![0.0; n],
        grad_logits: vec![0.0; n],
        weights: weights.clone(),
        skipped,
    };
    let mut first = true;
    for (l, &w) in labels.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let CtcOutput {
            loss,
            grad_probs,
            grad_logits,
        } = ctc_loss_grad(y, l)?;
        let scale = if multiply_gradients { w } else { 1.0 };
        if first {
            out.loss = scale * loss;
            out.grad_probs = grad_probs.iter().map(|g| scale * g).collect();
            out.grad_logits = grad_logits.iter().map(|g| scale * g).collect();
            first = false;
        } else {
            out.loss += scale * loss;
            out.grad_probs
                .iter_mut()
                .zip(&grad_probs)
                .for_each(|(a, g)| *a += scale * g);
            out.grad_logits
                .iter_mut()
                .zip(&grad_logits)
                .for_each(|(a, g)| *a += scale * g);
        }
    }
    Ok(out)
}

/// `λ·L_ctc(ŷ, l_i) + (1 − λ)·L_ctc(ŷ, l_j)`.
pub fn mixup_ctc_loss(
    y: &ProbSequence,
    l_i: &LabelSequence,
    l_j: &LabelSequence,
    lambda: f64,
    multiply_gradients: bool,
) -> Result<MixedLoss, CtcError> {
    mixed_ctc_loss(y, &[l_i, l_j], &[lambda, 1.0 - lambda], multiply_gradients)
}

/// `−Σ_c y_c·log ŷ_c`.
pub fn cross_entropy(predicted: &[f64], target: &[f64]) -> f64 {
    -predicted
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(p, t)| t * p.ln())
        .sum::<f64>()
}

/// Cross-entropy against the interpolated target `λ·y_i + (1 − λ)·y_j`.
pub fn mixup_crossentropy_loss(predicted: &[f64], y_i: &[f64], y_j: &[f64], lambda: f64) -> f64 {
    let mixed: Vec<f64> = y_i
        .iter()
        .zip(y_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    cross_entropy(predicted, &mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::ks_distance;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> ProbSequence {
        let logits: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ProbSequence::from_logits(frames, classes, &logits).unwrap()
    }

    #[test]
    fn inverse_transform_endpoints() {
        assert_eq!(beta_half_from_uniform(0.0), 0.0);
        assert_eq!(beta_half_from_uniform(1.0), 1.0);
        assert!((beta_half_from_uniform(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn beta_half_matches_arcsine_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dist = LambdaDistribution::Beta { alpha: 0.5 };
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_lambda(&mut rng, &dist)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.02);
        assert!(ks_distance(&mut xs, arcsine_cdf) < 0.01);
    }

    #[test]
    fn beta_two_by_gamma_ratio() {
        // Beta(2,2) CDF: 3x² − 2x³
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dist = LambdaDistribution::Beta { alpha: 2.0 };
        let mut xs: Vec<f64> = (0..50_000).map(|_| sample_lambda(&mut rng, &dist)).collect();
        assert!(ks_distance(&mut xs, |x| 3.0 * x * x - 2.0 * x * x * x) < 0.01);
    }

    #[test]
    fn uniform_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let dist = LambdaDistribution::Uniform { lo: 0.1, hi: 0.9 };
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_lambda(&mut rng, &dist)).collect();
        assert!(xs.iter().all(|&x| (0.1..=0.9).contains(&x)));
        assert!(ks_distance(&mut xs, |x| ((x - 0.1) / 0.8).clamp(0.0, 1.0)) < 0.01);
    }

    #[test]
    fn distribution_parsing() {
        assert_eq!(
            "beta".parse::<LambdaDistribution>().unwrap(),
            LambdaDistribution::Beta { alpha: 0.5 }
        );
        assert_eq!(
            "uniform:0.1:0.9".parse::<LambdaDistribution>().unwrap(),
            LambdaDistribution::Uniform { lo: 0.1, hi: 0.9 }
        );
        let d = LambdaDistribution::Beta { alpha: 2.0 };
        assert_eq!(d.to_string().parse::<LambdaDistribution>().unwrap(), d);
        assert!("uniform:0.9:0.1".parse::<LambdaDistribution>().is_err());
        assert!("beta:0".parse::<LambdaDistribution>().is_err());
        assert!("gauss".parse::<LambdaDistribution>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MixupConfig::default().validate().is_ok());
        let bad = MixupConfig {
            n_way: 4,
            ..MixupConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MixupConfig {
            positions: vec![],
            ..MixupConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn disabled_plan_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = make_plan(4, &mut rng, &MixupConfig::disabled()).unwrap();
        assert_eq!(plan, MixPlan::identity(4));
        assert!(plan.lambdas().iter().all(|&l| l == 1.0));
        assert!(!plan.is_mixing());
    }

    #[test]
    fn two_sample_plan_swaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = MixupConfig {
            positions: vec![0],
            ..MixupConfig::default()
        };
        let plan = make_plan(2, &mut rng, &config).unwrap();
        assert_eq!(plan.depth, Some(0));
        assert_eq!(plan.pairing().unwrap(), &[1, 0]);
    }

    #[test]
    fn batch_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            make_plan(1, &mut rng, &MixupConfig::default()),
            Err(MixupError::BatchTooSmall(1))
        );
    }

    #[test]
    fn depth_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = MixupConfig::default();
        let mut counts = [0usize; 9];
        let n = 10_000;
        for _ in 0..n {
            let plan = make_plan(8, &mut rng, &config).unwrap();
            counts[plan.depth.unwrap()] += 1;
        }
        for k in [0, 4, 8] {
            let f = counts[k] as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "depth {k}: {f}");
        }
    }

    #[test]
    fn no_fusion_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = MixupConfig {
            allow_no_fusion: true,
            ..MixupConfig::default()
        };
        let n = 10_000;
        let none = (0..n)
            .filter(|_| make_plan(8, &mut rng, &config).unwrap().depth.is_none())
            .count();
        assert!((none as f64 / n as f64 - 0.25).abs() < 0.02);
    }

    #[test]
    fn three_way_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = MixupConfig {
            n_way: 3,
            ..MixupConfig::default()
        };
        let plan = make_plan(5, &mut rng, &config).unwrap();
        assert_eq!(plan.partners.len(), 2);
        for w in &plan.weights {
            assert_eq!(w.len(), 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn feasibility_fallback_unmixes() {
        let mut plan = MixPlan {
            depth: Some(4),
            partners: vec![vec![1, 0]],
            weights: vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            skipped: vec![false; 2],
        };
        let labels = vec![LabelSequence(vec![0]), LabelSequence(vec![0; 5])];
        assert_eq!(plan.resolve_feasibility(&labels, 4), 2);
        assert_eq!(plan.weights[0], vec![1.0, 0.0]);
        assert_eq!(plan.weights[1], vec![0.0, 1.0]);
        assert!(plan.skipped.iter().all(|&s| s));
        assert!(!plan.dropped(0));
    }

    #[test]
    fn interpolation_examples() {
        let a = Tensor::from_vec(vec![4.0]);
        let b = Tensor::from_vec(vec![8.0]);
        assert_eq!(interpolate_features(&a, &b, 0.25).unwrap().data(), &[7.0]);
        assert_eq!(interpolate_features(&a, &b, 1.0).unwrap(), a);
        assert_eq!(interpolate_features(&a, &a, 0.37).unwrap(), a);
        assert!(interpolate_features(&a, &Tensor::zeros(vec![2]), 0.5).is_err());
        let c = Tensor::from_vec(vec![2.0]);
        let m = interpolate_many(&[&a, &b, &c], &[0.5, 0.25, 0.25]).unwrap();
        assert_eq!(m.data(), &[4.5]);
    }

    #[test]
    fn taped_interpolation_routes_weighted_gradients() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.variable(Tensor::from_vec(vec![3.0, 4.0]));
        let m = interpolate_features_taped(&mut tape, a, b, 0.3).unwrap();
        let s = tape.sum(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.3, 0.3]);
        assert!((tape.grad(b).unwrap()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mixed_loss_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_probs(&mut rng, 6, 4);
        let li = LabelSequence(vec![0, 1]);
        let lj = LabelSequence(vec![2, 2, 1]);
        let single = ctc_loss_grad(&y, &li).unwrap();
        let m = mixup_ctc_loss(&y, &li, &lj, 1.0, true).unwrap();
        assert_eq!(m.loss, single.loss);
        assert_eq!(m.grad_logits, single.grad_logits);
        for lambda in [0.0, 0.2, 0.9] {
            let m = mixup_ctc_loss(&y, &li, &li, lambda, true).unwrap();
            assert!((m.loss - single.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_loss_is_weighted_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let y = random_probs(&mut rng, 7, 4);
            let li = LabelSequence((0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..3)).collect());
            let lj = LabelSequence((0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..3)).collect());
            let lambda: f64 = rng.gen();
            let m = mixup_ctc_loss(&y, &li, &lj, lambda, true).unwrap();
            let a = ctc_loss_grad(&y, &li).unwrap();
            let b = ctc_loss_grad(&y, &lj).unwrap();
            let expected = lambda * a.loss + (1.0 - lambda) * b.loss;
            assert!((m.loss - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            for i in 0..m.grad_logits.len() {
                let e = lambda * a.grad_logits[i] + (1.0 - lambda) * b.grad_logits[i];
                assert!((m.grad_logits[i] - e).abs() <= 1e-12);
                let e = lambda * a.grad_probs[i] + (1.0 - lambda) * b.grad_probs[i];
                assert!((m.grad_probs[i] - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unweighted_sum_without_gradient_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_probs(&mut rng, 6, 4);
        let li = LabelSequence(vec![0, 1]);
        let lj = LabelSequence(vec![2]);
        let m = mixup_ctc_loss(&y, &li, &lj, 0.3, false).unwrap();
        let a = ctc_loss_grad(&y, &li).unwrap().loss;
        let b = ctc_loss_grad(&y, &lj).unwrap().loss;
        assert!((m.loss - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_label_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = random_probs(&mut rng, 3, 3);
        let ok = LabelSequence(vec![0]);
        let bad = LabelSequence(vec![1, 1, 1]);
        let m = mixup_ctc_loss(&y, &ok, &bad, 0.4, true).unwrap();
        assert!(m.skipped);
        assert_eq!(m.weights, vec![1.0, 0.0]);
        assert_eq!(m.loss, ctc_loss_grad(&y, &ok).unwrap().loss);
        let m = mixup_ctc_loss(&y, &bad, &ok, 1.0, true).unwrap();
        assert_eq!(m.weights, vec![0.0, 1.0]);
        assert!(matches!(
            mixup_ctc_loss(&y, &bad, &bad, 0.5, true),
            Err(CtcError::InfeasibleAlignment { .. })
        ));
    }

    #[test]
    fn crossentropy_examples() {
        let one_hot = [0.0, 1.0, 0.0];
        assert_eq!(mixup_crossentropy_loss(&one_hot, &one_hot, &[1.0, 0.0, 0.0], 1.0), 0.0);
        let p = [0.2, 0.5, 0.3];
        assert!(
            (mixup_crossentropy_loss(&p, &one_hot, &one_hot, 0.5) - cross_entropy(&p, &one_hot))
                .abs()
                < 1e-15
        );
    }

    proptest! {
        #[test]
        fn crossentropy_linearity(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = ProbSequence::from_logits(1, 5, &logits).unwrap();
            let mut yi = [0.0; 5];
            let mut yj = [0.0; 5];
            yi[rng.gen_range(0..5)] = 1.0;
            yj[rng.gen_range(0..5)] = 1.0;
            let mixed = mixup_crossentropy_loss(y.probs(), &yi, &yj, lambda);
            let split = lambda * cross_entropy(y.probs(), &yi) + (1.0 - lambda) * cross_entropy(y.probs(), &yj);
            prop_assert!((mixed - split).abs() < 1e-12);
        }

        #[test]
        fn interpolation_stays_in_envelope(seed in any::<u64>(), lambda in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_vec((0..16).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let b = Tensor::from_vec((0..16).map(|_| rng.gen_range(-5.0..5.0)).collect());
            let m = interpolate_features(&a, &b, lambda).unwrap();
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(m.data()) {
                let eps = 1e-12;
                prop_assert!(*z >= x.min(*y) - eps && *z <= x.max(*y) + eps);
            }
        }

        #[test]
        fn derangements_have_no_fixed_points(seed in any::<u64>(), n in 2usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_derangement(n, &mut rng);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }
}
