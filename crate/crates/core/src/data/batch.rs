//! Rescaling, normalisation and width-bucketed mini-batches.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, LineImage};
use crate::ctc::{LabelSequence, Vocabulary};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Intensity used for padding, before normalisation.
const WHITE: f64 = 255.0;

/// A line rescaled to the network height, still in raw intensity units.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedLine {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub transcript: String,
    pub labels: LabelSequence,
}

/// Isotropic bilinear rescale to `target_height`; the width follows the same
/// factor, rounded, and is at least 1. Returns `(width, pixels)`.
pub fn rescale(img: &LineImage, target_height: usize) -> (usize, Vec<f64>) {
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    if target_height == img.height {
        return (img.width, src);
    }
    let factor = target_height as f64 / img.height as f64;
    let width = ((img.width as f64 * factor).round() as usize).max(1);
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / target_height as f64;
    // Half-pixel-centre convention, clamped at the borders.
    let coord = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| coord(x, sx, img.width)).collect();
    let mut out = Vec::with_capacity(target_height * width);
    for y in 0..target_height {
        let (y0, y1, fy) = coord(y, sy, img.height);
        for &(x0, x1, fx) in &cols {
            let at = |yy: usize, xx: usize| src[yy * img.width + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    (width, out)
}

/// Per-image standardisation to zero mean and unit variance; variances
/// below [`VARIANCE_FLOOR`] are floored so flat images map to zeros.
pub fn standardize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.max(VARIANCE_FLOOR).sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) / std);
}

/// Rescale then standardise one image, giving a `[1, H, W]` tensor.
pub fn preprocess(img: &LineImage, target_height: usize) -> Tensor {
    let (width, mut pixels) = rescale(img, target_height);
    standardize(&mut pixels);
    Tensor::new(vec![1, target_height, width], pixels).expect("rescaled size")
}

/// Rescales every line and encodes its transcript.
pub fn prepare_lines(
    lines: &[LineImage],
    target_height: usize,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedLine>, DataError> {
    lines
        .iter()
        .map(|img| {
            let labels = vocab
                .encode(&img.transcript)
                .map_err(|_| DataError::OutOfVocabulary(img.transcript.clone()))?;
            let (width, pixels) = rescale(img, target_height);
            Ok(PreparedLine {
                height: target_height,
                width,
                pixels,
                transcript: img.transcript.clone(),
                labels,
            })
        })
        .collect()
}

/// Sorts indices by width (ties by index) and cuts them into consecutive
/// runs of `batch_size`; the last run may be short.
pub fn partition_by_width(
    widths: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    if widths.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.sort_by_key(|&i| (widths[i], i));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, 1, H, W_pad]`, normalised.
    pub images: Tensor,
    /// Width of each line before padding.
    pub widths: Vec<usize>,
    pub labels: Vec<LabelSequence>,
    pub transcripts: Vec<String>,
    /// Positions of the samples in the source set.
    pub indices: Vec<usize>,
    pub bucket: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn padded_width(&self) -> usize {
        self.images.shape()[3]
    }
}

/// Pads the selected lines to their common maximum width with white, then
/// standardises each padded image.
pub fn assemble_batch(lines: &[PreparedLine], indices: &[usize], bucket: usize) -> Batch {
    let height = lines[indices[0]].height;
    let w_pad = indices.iter().map(|&i| lines[i].width).max().unwrap_or(1);
    let mut data = Vec::with_capacity(indices.len() * height * w_pad);
    for &i in indices {
        let line = &lines[i];
        let mut img = vec![WHITE; height * w_pad];
        for y in 0..height {
            img[y * w_pad..y * w_pad + line.width]
                .copy_from_slice(&line.pixels[y * line.width..(y + 1) * line.width]);
        }
        standardize(&mut img);
        data.extend_from_slice(&img);
    }
    Batch {
        images: Tensor::new(vec![indices.len(), 1, height, w_pad], data).expect("batch size"),
        widths: indices.iter().map(|&i| lines[i].width).collect(),
        labels: indices.iter().map(|&i| lines[i].labels.clone()).collect(),
        transcripts: indices.iter().map(|&i| lines[i].transcript.clone()).collect(),
        indices: indices.to_vec(),
        bucket,
    }
}

/// Width-bucketed batches in a random order. Membership is fixed by the
/// sorted partition; only the order depends on `rng`.
pub fn bucket_batches<R: Rng + ?Sized>(
    lines: &[PreparedLine],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>, DataError> {
    let widths: Vec<usize> = lines.iter().map(|l| l.width).collect();
    let parts = partition_by_width(&widths, batch_size)?;
    let mut batches: Vec<Batch> = parts
        .iter()
        .enumerate()
        .map(|(b, idx)| assemble_batch(lines, idx, b))
        .collect();
    batches.shuffle(rng);
    Ok(batches)
}
