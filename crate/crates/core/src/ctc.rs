//! Connectionist Temporal Classification: loss and gradient by log-space
//! forward-backward, a brute-force enumeration oracle, and greedy decoding.
//!
//! The blank is always the last class: with `C` symbols, class `C` is the
//! blank and every frame carries `C + 1` probabilities.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("no alignment of {labels} labels ({min_frames} frames minimum) fits in {frames} frames")]
    InfeasibleAlignment {
        labels: usize,
        min_frames: usize,
        frames: usize,
    },
    #[error("brute-force enumeration limited to T <= {max_frames} and C <= {max_symbols}, got T = {frames}, C = {symbols}")]
    TooLarge {
        frames: usize,
        symbols: usize,
        max_frames: usize,
        max_symbols: usize,
    },
    #[error("label {label} is out of range for {symbols} symbols")]
    LabelOutOfRange { label: usize, symbols: usize },
    #[error("invalid probability sequence: {0}")]
    InvalidProbs(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("character {0:?} is not in the vocabulary")]
    UnknownSymbol(char),
}

/// Ordered character set; the blank is implied at index `len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self, CtcError> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(CtcError::InvalidVocabulary("empty alphabet".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(CtcError::InvalidVocabulary(format!(
                    "duplicate symbol {c:?}"
                )));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Number of user symbols `C`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    /// Total classes `C + 1`, blank included.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence, CtcError> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(CtcError::UnknownSymbol(c)))
            .collect::<Result<Vec<_>, _>>()
            .map(LabelSequence)
    }

    pub fn decode(&self, labels: &LabelSequence) -> String {
        labels
            .0
            .iter()
            .filter_map(|&i| self.symbol(i))
            .collect()
    }
}

/// Target label indices, blanks excluded.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Fewest frames any alignment needs: one per label plus a separating
    /// blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }

    pub fn fits(&self, frames: usize) -> bool {
        frames >= self.min_frames()
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// A `T × (C + 1)` row-major matrix of per-frame class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSequence {
    frames: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbSequence {
    /// Validates that every row is a distribution within `1e-9`.
    pub fn new(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self, CtcError> {
        let seq = Self::new_unchecked(frames, classes, probs)?;
        for (t, row) in seq.rows().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(CtcError::InvalidProbs(format!("negative or NaN entry at frame {t}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CtcError::InvalidProbs(format!("frame {t} sums to {s}")));
            }
        }
        Ok(seq)
    }

    /// Only checks dimensions; used by finite-difference probes that
    /// perturb entries off the simplex.
    pub fn new_unchecked(frames: usize, classes: usize, probs: Vec<f64>) -> Result<Self, CtcError> {
        if classes < 2 {
            return Err(CtcError::InvalidProbs("need at least one symbol and the blank".into()));
        }
        if probs.len() != frames * classes {
            return Err(CtcError::InvalidProbs(format!(
                "{} values for {frames} frames of {classes} classes",
                probs.len()
            )));
        }
        Ok(Self {
            frames,
            classes,
            probs,
        })
    }

    /// Row-wise softmax of raw scores.
    pub fn from_logits(frames: usize, classes: usize, logits: &[f64]) -> Result<Self, CtcError> {
        let mut seq = Self::new_unchecked(frames, classes, logits.to_vec())?;
        for row in seq.probs.chunks_mut(classes) {
            crate::autodiff::softmax_in_place(row);
        }
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.probs[t * self.classes..(t + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.probs[t * self.classes + c]
    }
}

/// Interleaves blanks around every label: `[–, l₁, –, l₂, …, l_S, –]`.
pub fn expand_targets(labels: &LabelSequence, blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(blank);
    for &l in labels.as_slice() {
        out.push(l);
        out.push(blank);
    }
    out
}

/// Loss and gradients of one CTC evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// `−log p(l | y)`.
    pub loss: f64,
    /// `∂loss/∂y` as a `T × (C + 1)` matrix.
    pub grad_probs: Vec<f64>,
    /// `∂loss/∂u` for scores `u` with `y = softmax(u)` per frame.
    pub grad_logits: Vec<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn check_labels(y: &ProbSequence, labels: &LabelSequence) -> Result<(), CtcError> {
    let symbols = y.classes - 1;
    if let Some(&label) = labels.as_slice().iter().find(|&&l| l >= symbols) {
        return Err(CtcError::LabelOutOfRange { label, symbols });
    }
    if y.frames == 0 || !labels.fits(y.frames) {
        return Err(CtcError::InfeasibleAlignment {
            labels: labels.len(),
            min_frames: labels.min_frames(),
            frames: y.frames,
        });
    }
    Ok(())
}

/// CTC loss and its gradients by forward-backward in log space.
///
/// `α_t(s)` covers emissions up to and including frame `t`; `β_t(s)` covers
/// emissions strictly after `t`. Their sum at `(t, s)` is therefore the log
/// probability mass of all paths through state `s` at `t` with the emission
/// at `t` factored out, which is exactly `∂p/∂y` and stays finite when
/// `y = 0`.
pub fn ctc_loss_grad(y: &ProbSequence, labels: &LabelSequence) -> Result<CtcOutput, CtcError> {
    check_labels(y, labels)?;
    let (t_len, classes) = (y.frames, y.classes);
    let ext = expand_targets(labels, y.blank());
    let s_len = ext.len();
    let log_y: Vec<f64> = y.probs.iter().map(|p| p.ln()).collect();
    let ly = |t: usize, c: usize| log_y[t * classes + c];
    let skip_ok = |s: usize| s >= 2 && ext[s] != y.blank() && ext[s] != ext[s - 2];

    // Forward, without the emission at t: alpha_pre[t][s].
    let neg = f64::NEG_INFINITY;
    let mut alpha_pre = vec![neg; t_len * s_len];
    let mut alpha = vec![neg; t_len * s_len];
    alpha_pre[0] = 0.0;
    if s_len > 1 {
        alpha_pre[1] = 0.0;
    }
    for t in 0..t_len {
        if t > 0 {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut v = prev[s];
                if s >= 1 {
                    v = log_add(v, prev[s - 1]);
                }
                if skip_ok(s) {
                    v = log_add(v, prev[s - 2]);
                }
                alpha_pre[t * s_len + s] = v;
            }
        }
        for s in 0..s_len {
            alpha[t * s_len + s] = alpha_pre[t * s_len + s] + ly(t, ext[s]);
        }
    }

    // Backward, excluding the emission at t: beta[t][s].
    let mut beta = vec![neg; t_len * s_len];
    let last = t_len - 1;
    beta[last * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = 0.0;
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + ly(t + 1, ext[s2]);
            let mut v = next(s);
            if s + 1 < s_len {
                v = log_add(v, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                v = log_add(v, next(s + 2));
            }
            beta[t * s_len + s] = v;
        }
    }

    let mut log_p = alpha[last * s_len + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last * s_len + s_len - 2]);
    }
    let loss = -log_p;

    let mut grad_probs = vec![0.0; t_len * classes];
    let mut grad_logits = vec![0.0; t_len * classes];
    if !log_p.is_finite() {
        return Ok(CtcOutput {
            loss: f64::INFINITY,
            grad_probs: vec![f64::NAN; t_len * classes],
            grad_logits: vec![f64::NAN; t_len * classes],
        });
    }
    let mut dp = vec![neg; classes];
    for t in 0..t_len {
        dp.iter_mut().for_each(|v| *v = neg);
        for s in 0..s_len {
            let c = ext[s];
            dp[c] = log_add(dp[c], alpha_pre[t * s_len + s] + beta[t * s_len + s]);
        }
        for c in 0..classes {
            let i = t * classes + c;
            let rel = dp[c] - log_p;
            grad_probs[i] = -rel.exp();
            // y_c · (∂p/∂y_c) / p, computed in log space
            let occupancy = if dp[c] == neg { 0.0 } else { (ly(t, c) + rel).exp() };
            grad_logits[i] = y.probs[i] - occupancy;
        }
    }
    Ok(CtcOutput {
        loss,
        grad_probs,
        grad_logits,
    })
}

/// Limits of [`ctc_brute_force`].
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;
pub const BRUTE_FORCE_MAX_SYMBOLS: usize = 5;

/// Collapses a frame path: merges consecutive repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

fn check_brute_force(y: &ProbSequence) -> Result<(), CtcError> {
    let symbols = y.classes - 1;
    if y.frames > BRUTE_FORCE_MAX_FRAMES || symbols > BRUTE_FORCE_MAX_SYMBOLS {
        return Err(CtcError::TooLarge {
            frames: y.frames,
            symbols,
            max_frames: BRUTE_FORCE_MAX_FRAMES,
            max_symbols: BRUTE_FORCE_MAX_SYMBOLS,
        });
    }
    Ok(())
}

/// `−log Σ_{π ∈ B(l)} Π_t y_{π_t}^t` by enumerating all `(C + 1)^T` paths.
///
/// Probabilities are used as given (no renormalisation), so the result is
/// differentiable in every entry for finite-difference probes.
pub fn ctc_brute_force(y: &ProbSequence, labels: &LabelSequence) -> Result<f64, CtcError> {
    check_brute_force(y)?;
    check_labels(y, labels)?;
    let (t_len, classes) = (y.frames, y.classes);
    let blank = y.blank();
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == labels.as_slice() {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &c)| y.get(t, c))
                .product::<f64>();
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == t_len {
                return Ok(-total.ln());
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Central finite differences of [`ctc_brute_force`] with respect to every
/// probability entry.
pub fn ctc_brute_force_grad(
    y: &ProbSequence,
    labels: &LabelSequence,
    step: f64,
) -> Result<Vec<f64>, CtcError> {
    ctc_brute_force(y, labels)?;
    let (t_len, classes) = (y.frames, y.classes);
    Ok(crate::gradcheck::central_differences(&y.probs, step, |p| {
        let probe = ProbSequence::new_unchecked(t_len, classes, p.to_vec()).expect("dims");
        ctc_brute_force(&probe, labels).expect("checked above")
    }))
}

/// Per-frame argmax (ties to the lowest class), collapse repeats, drop blanks.
pub fn greedy_decode(y: &ProbSequence) -> LabelSequence {
    let path: Vec<usize> = y
        .rows()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    LabelSequence(collapse(&path, y.blank()))
}
