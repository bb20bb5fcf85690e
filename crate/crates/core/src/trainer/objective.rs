//! The per-batch training objective: forward pass, mixed CTC loss per
//! sample, and the batch mean attached to the tape.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::ctc::{CtcError, LabelSequence};
use crate::data::Batch;
use crate::mixup::{mixed_ctc_loss, MixPlan};
use crate::model::{split_logits, Network};

use super::TrainError;

/// Per-sample CTC targets: `(label, weight)` pairs.
pub type Targets<'a> = Vec<Vec<(&'a LabelSequence, f64)>>;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveStats {
    /// Mean loss over contributing samples.
    pub loss: f64,
    /// Samples that contributed to the loss.
    pub active: usize,
    /// Samples whose targets were altered or dropped for alignability.
    pub skipped: usize,
    pub frames: usize,
}

/// Targets implied by a mixing plan: each sample's own label and its
/// partners' labels, weighted as in the plan.
pub fn plan_targets<'a>(plan: &MixPlan, labels: &'a [LabelSequence]) -> Targets<'a> {
    (0..plan.batch_size())
        .map(|b| {
            plan.components(b)
                .into_iter()
                .map(|(j, w)| (&labels[j], w))
                .collect()
        })
        .collect()
}

/// Runs the network and attaches `mean_b Σ_m w_bm · L_ctc(ŷ_b, l_bm)` to
/// the tape. Samples with no alignable target are left out of the mean.
/// Returns `None` for the loss node when no sample contributes.
#[allow(clippy::too_many_arguments)]
pub fn ctc_objective(
    net: &Network,
    tape: &mut Tape,
    params: &[Var],
    batch: &Batch,
    plan: Option<&MixPlan>,
    targets: &Targets<'_>,
    multiply_gradients: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(Option<Var>, ObjectiveStats), TrainError> {
    let images = tape.constant(batch.images.clone());
    let logits = net.forward(tape, params, images, plan, dropout)?;
    attach_loss(tape, logits, targets, multiply_gradients)
}

/// Scores `logits` against `targets` and attaches the batch mean.
pub(super) fn attach_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Targets<'_>,
    multiply_gradients: bool,
) -> Result<(Option<Var>, ObjectiveStats), TrainError> {
    let probs = split_logits(tape.value(logits));
    let block = probs[0].frames() * probs[0].classes();
    let mut grad = vec![0.0; block * probs.len()];
    let mut stats = ObjectiveStats {
        frames: probs[0].frames(),
        ..ObjectiveStats::default()
    };
    let mut total = 0.0;
    for (b, (y, t)) in probs.iter().zip(targets).enumerate() {
        let labels: Vec<&LabelSequence> = t.iter().map(|(l, _)| *l).collect();
        let weights: Vec<f64> = t.iter().map(|(_, w)| *w).collect();
        if weights.iter().all(|&w| w == 0.0) {
            stats.skipped += 1;
            continue;
        }
        match mixed_ctc_loss(y, &labels, &weights, multiply_gradients) {
            Ok(m) => {
                stats.skipped += usize::from(m.skipped);
                stats.active += 1;
                total += m.loss;
                grad[b * block..(b + 1) * block].copy_from_slice(&m.grad_logits);
            }
            Err(CtcError::InfeasibleAlignment { .. }) => stats.skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if stats.active == 0 {
        return Ok((None, stats));
    }
    let n = stats.active as f64;
    stats.loss = total / n;
    grad.iter_mut().for_each(|g| *g /= n);
    let loss = tape
        .external_loss(logits, stats.loss, grad)
        .map_err(crate::model::ModelError::from)?;
    Ok((Some(loss), stats))
}

/// Loss and parameter gradients for one batch under `plan`.
pub fn batch_gradients(
    net: &Network,
    batch: &Batch,
    plan: &MixPlan,
    multiply_gradients: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(ObjectiveStats, Option<Vec<Vec<f64>>>), TrainError> {
    let targets = plan_targets(plan, &batch.labels);
    gradients_for_targets(net, batch, Some(plan), &targets, multiply_gradients, dropout)
}

/// Loss and parameter gradients for arbitrary targets; the plan only
/// drives feature mixing.
pub fn gradients_for_targets(
    net: &Network,
    batch: &Batch,
    plan: Option<&MixPlan>,
    targets: &Targets<'_>,
    multiply_gradients: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<(ObjectiveStats, Option<Vec<Vec<f64>>>), TrainError> {
    let mut tape = Tape::new();
    let params = net.register(&mut tape);
    let (loss, stats) = ctc_objective(
        net,
        &mut tape,
        &params,
        batch,
        plan,
        targets,
        multiply_gradients,
        dropout,
    )?;
    let Some(loss) = loss else {
        return Ok((stats, None));
    };
    tape.backward(loss).map_err(crate::model::ModelError::from)?;
    let grads = params
        .iter()
        .map(|&v| tape.grad(v).expect("parameters track gradients").to_vec())
        .collect();
    Ok((stats, Some(grads)))
}

/// Loss only, without gradients; used by finite-difference checks.
pub fn batch_loss(
    net: &Network,
    batch: &Batch,
    plan: Option<&MixPlan>,
    targets: &Targets<'_>,
    multiply_gradients: bool,
) -> Result<ObjectiveStats, TrainError> {
    let mut tape = Tape::new();
    let params = net.register_frozen(&mut tape);
    let (_, stats) = ctc_objective(
        net,
        &mut tape,
        &params,
        batch,
        plan,
        targets,
        multiply_gradients,
        None,
    )?;
    Ok(stats)
}
