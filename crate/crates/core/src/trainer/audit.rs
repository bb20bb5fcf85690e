//! Whole-model gradient audits: finite differences against backprop, and
//! the linearity of the mixed objective in its label weights.

use crate::data::Batch;
use crate::gradcheck::relative_error;
use crate::mixup::MixPlan;
use crate::model::Network;

use crate::autodiff::Tape;
use crate::tensor::Tensor;

use super::objective::attach_loss;
use super::{batch_gradients, gradients_for_targets, plan_targets, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    /// Backprop and finite-difference values at the worst entry.
    pub worst_values: (f64, f64),
    /// Entries that only agreed after shrinking the step.
    pub refined: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Check entries `0, stride, 2·stride, …` of every tensor.
    pub stride: usize,
    /// Entries whose error exceeds this are re-measured with the step cut
    /// by 10 and then 100. A ReLU or max-pool switch inside `±step` breaks
    /// the central difference, and a shorter interval avoids the switch.
    /// A wrong backprop value disagrees at every step.
    pub refine_above: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            stride: 1,
            refine_above: 1e-4,
        }
    }
}

/// Compares parameter gradients with central differences of the batch
/// loss. Each entry's error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    net: &Network,
    batch: &Batch,
    plan: &MixPlan,
    multiply_gradients: bool,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    let (step, floor) = (opts.step, opts.floor);
    let (stats, grads) = batch_gradients(net, batch, plan, multiply_gradients, None)?;
    let grads = grads.ok_or_else(|| {
        TrainError::InvalidConfig("no sample in the probe batch can be aligned".into())
    })?;
    let targets = plan_targets(plan, &batch.labels);
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        parameters: 0,
        max_relative_error: 0.0,
        worst: String::new(),
        worst_values: (0.0, 0.0),
        refined: 0,
        loss: stats.loss,
    };
    let names: Vec<String> = net.params.names().iter().map(|s| s.to_string()).collect();
    // Perturbing convolution layer `l` leaves everything before it intact,
    // so each evaluation restarts from the cached input of that layer.
    let convs = net.config.convs.len();
    let mut cache: Option<(usize, Tensor)> = None;
    for (k, g) in grads.iter().enumerate() {
        let from = (k / 2).min(convs);
        if cache.as_ref().map(|c| c.0) != Some(from) {
            cache = Some((from, net.prefix(&batch.images, from, Some(plan))?));
        }
        let start = &cache.as_ref().expect("filled above").1;
        for (i, &analytic) in g.iter().enumerate().step_by(opts.stride.max(1)) {
            let orig = probe.params.tensors()[k].data()[i];
            let mut eval = |x: f64| -> Result<f64, TrainError> {
                probe.params.tensors_mut()[k].data_mut()[i] = x;
                let mut tape = Tape::new();
                let params = probe.register_frozen(&mut tape);
                let input = tape.constant(start.clone());
                let logits = probe.resume(&mut tape, &params, input, from, Some(plan))?;
                let (_, stats) = attach_loss(&mut tape, logits, &targets, multiply_gradients)?;
                if stats.active == 0 {
                    return Err(TrainError::InvalidConfig("probe batch lost every sample".into()));
                }
                Ok(stats.loss)
            };
            let mut central = |h: f64| -> Result<f64, TrainError> {
                Ok((eval(orig + h)? - eval(orig - h)?) / (2.0 * h))
            };
            let mut numeric = central(step)?;
            let mut err = relative_error(analytic, numeric, floor);
            if err > opts.refine_above {
                for h in [step / 10.0, step / 100.0] {
                    let n = central(h)?;
                    let e = relative_error(analytic, n, floor);
                    if e < err {
                        (numeric, err) = (n, e);
                    }
                    if err <= opts.refine_above {
                        report.refined += 1;
                        break;
                    }
                }
            }
            probe.params.tensors_mut()[k].data_mut()[i] = orig;
            report.parameters += 1;
            if !(err <= report.max_relative_error) {
                report.max_relative_error = err;
                report.worst = format!("{}[{i}]", names[k]);
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearityReport {
    pub loss_error: f64,
    /// Largest per-tensor `‖mixed − combined‖∞ / ‖mixed‖∞`.
    pub grad_error: f64,
}

/// Evaluates the mixed objective of `plan` against the same forward pass
/// scored separately on each sample's own labels and on its partners'
/// labels. Every sample must share one λ so the batch means combine.
pub fn linearity_audit(net: &Network, batch: &Batch, plan: &MixPlan) -> Result<LinearityReport, TrainError> {
    let lambda = plan.weights[0][0];
    if plan.partners.len() != 1 || plan.weights.iter().any(|w| w[0] != lambda) {
        return Err(TrainError::InvalidConfig(
            "linearity audit needs a two-way plan with one shared λ".into(),
        ));
    }
    let mixed_targets = plan_targets(plan, &batch.labels);
    let own: Vec<Vec<_>> = (0..batch.len()).map(|b| vec![(&batch.labels[b], 1.0)]).collect();
    let partner: Vec<Vec<_>> = plan.partners[0]
        .iter()
        .map(|&j| vec![(&batch.labels[j], 1.0)])
        .collect();
    let run = |t| gradients_for_targets(net, batch, Some(plan), t, true, None);
    let (sm, gm) = run(&mixed_targets)?;
    let (so, go) = run(&own)?;
    let (sp, gp) = run(&partner)?;
    let missing = || TrainError::InvalidConfig("probe batch has unalignable labels".into());
    let (gm, go, gp) = (gm.ok_or_else(missing)?, go.ok_or_else(missing)?, gp.ok_or_else(missing)?);
    if sm.active != batch.len() || so.active != batch.len() || sp.active != batch.len() {
        return Err(missing());
    }
    let combined_loss = lambda * so.loss + (1.0 - lambda) * sp.loss;
    let mut grad_error: f64 = 0.0;
    for ((m, o), p) in gm.iter().zip(&go).zip(&gp) {
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = m
            .iter()
            .zip(o.iter().zip(p))
            .map(|(m, (o, p))| (m - (lambda * o + (1.0 - lambda) * p)).abs())
            .fold(0.0f64, f64::max);
        if scale > 0.0 {
            grad_error = grad_error.max(diff / scale);
        } else {
            grad_error = grad_error.max(diff);
        }
    }
    Ok(LinearityReport {
        loss_error: relative_error(sm.loss, combined_loss, f64::MIN_POSITIVE),
        grad_error,
    })
}
