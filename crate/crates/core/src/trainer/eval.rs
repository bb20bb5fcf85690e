//! Greedy-decoding evaluation in dataset order.

use crate::ctc::{ctc_loss_grad, greedy_decode, CtcError};
use crate::data::{prepare_lines, Batch, LineImage, PreparedLine};
use crate::metrics::{cer_with_losses, EvalReport};
use crate::model::Network;

use super::{make_batches, TrainError};

/// Decodes every line of `lines` and scores it against its transcript.
/// Lines are batched by width but reported in their original order.
pub fn evaluate(
    net: &Network,
    lines: &[LineImage],
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let vocab = net.config.vocab()?;
    for l in lines {
        if let Some(c) = l.transcript.chars().find(|&c| vocab.index_of(c).is_none()) {
            return Err(TrainError::ConfigMismatch(format!(
                "transcript {:?} uses {c:?}, which the model vocabulary {:?} lacks",
                l.transcript,
                vocab.as_string()
            )));
        }
    }
    let prepared = prepare_lines(lines, net.config.input_height, &vocab)?;
    evaluate_prepared(net, &prepared, batch_size)
}

pub fn evaluate_prepared(
    net: &Network,
    lines: &[PreparedLine],
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    let batches = make_batches(lines, batch_size)?;
    evaluate_batches(net, lines, &batches)
}

pub(super) fn evaluate_batches(
    net: &Network,
    lines: &[PreparedLine],
    batches: &[Batch],
) -> Result<EvalReport, TrainError> {
    let vocab = net.config.vocab()?;
    let mut predictions = vec![String::new(); lines.len()];
    // Lines whose label cannot be aligned to the available frames have no
    // loss; they still count towards the CER.
    let mut losses = vec![f64::NAN; lines.len()];
    for batch in batches {
        let probs = net.predict(&batch.images)?;
        for ((y, &i), labels) in probs.iter().zip(&batch.indices).zip(&batch.labels) {
            predictions[i] = vocab.decode(&greedy_decode(y));
            match ctc_loss_grad(y, labels) {
                Ok(out) => losses[i] = out.loss,
                Err(CtcError::InfeasibleAlignment { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    let references: Vec<String> = lines.iter().map(|l| l.transcript.clone()).collect();
    let mut report = cer_with_losses(&predictions, &references, Some(&losses))
        .expect("one prediction and loss per line");
    let finite: Vec<f64> = losses.into_iter().filter(|l| !l.is_nan()).collect();
    report.mean_loss = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    for r in &mut report.lines {
        r.loss = r.loss.filter(|l| !l.is_nan());
    }
    Ok(report)
}
