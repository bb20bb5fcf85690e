//! Character error rate from Levenshtein distance.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{predictions} predictions for {references} references")]
    LengthMismatch {
        predictions: usize,
        references: usize,
    },
}

/// Unit-cost edit distance between two strings, counted in Unicode scalar
/// values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_slices(&a, &b)
}

/// Edit distance over arbitrary comparable symbols (two-row table).
pub fn levenshtein_slices<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineRecord {
    pub reference: String,
    pub prediction: String,
    pub edits: usize,
    pub reference_chars: usize,
    /// Per-sample CTC loss, when the caller measured it.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub reference_chars: usize,
    pub edits: usize,
    /// `edits / reference_chars`, or `edits` when there are no reference
    /// characters at all (see [`EvalReport::no_reference_chars`]).
    pub cer: f64,
    /// Set when every reference is empty and `cer` fell back to the raw
    /// edit count.
    pub no_reference_chars: bool,
    /// Mean CTC loss over the lines that have one.
    pub mean_loss: Option<f64>,
    pub lines: Vec<LineRecord>,
}

/// Micro-averaged CER: total edits over total reference characters.
pub fn cer(predictions: &[String], references: &[String]) -> Result<EvalReport, MetricsError> {
    cer_with_losses(predictions, references, None)
}

/// Like [`cer`], also recording one loss per line.
pub fn cer_with_losses(
    predictions: &[String],
    references: &[String],
    losses: Option<&[f64]>,
) -> Result<EvalReport, MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if let Some(l) = losses {
        if l.len() != references.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: l.len(),
                references: references.len(),
            });
        }
    }
    let lines: Vec<LineRecord> = predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (p, r))| LineRecord {
            reference: r.clone(),
            prediction: p.clone(),
            edits: levenshtein(p, r),
            reference_chars: r.chars().count(),
            loss: losses.map(|l| l[i]),
        })
        .collect();
    let edits: usize = lines.iter().map(|l| l.edits).sum();
    let reference_chars: usize = lines.iter().map(|l| l.reference_chars).sum();
    let no_reference_chars = reference_chars == 0;
    let cer = if no_reference_chars {
        edits as f64
    } else {
        edits as f64 / reference_chars as f64
    };
    let mean_loss = losses
        .filter(|l| !l.is_empty())
        .map(|l| l.iter().sum::<f64>() / l.len() as f64);
    Ok(EvalReport {
        reference_chars,
        edits,
        cer,
        no_reference_chars,
        mean_loss,
        lines,
    })
}

impl EvalReport {
    /// `cer=<float> lines=<int> edits=<int>`
    pub fn summary(&self) -> String {
        format!(
            "cer={:.6} lines={} edits={}",
            self.cer,
            self.lines.len(),
            self.edits
        )
    }

    /// Per-line TSV with a header row: reference, prediction, edits,
    /// reference length, loss.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("reference\tprediction\tedits\tref_chars\tloss\n");
        for l in &self.lines {
            let loss = l.loss.map_or_else(String::new, |v| format!("{v:.17e}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                l.reference, l.prediction, l.edits, l.reference_chars, loss
            );
        }
        out
    }
}
