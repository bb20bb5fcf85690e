//! Gated convolutional encoder with a bidirectional LSTM decoder.
//!
//! The stack is: 2×2 tiling, eight convolution rows (some gated), a
//! vertical max-pool that collapses the height to one, then BLSTM, linear,
//! BLSTM, linear and an output projection onto the labels plus blank.
//!
//! Mixing depths are counted over convolution rows: depth 0 is the
//! preprocessed image, depth `k` is the output of the k-th convolution row.

mod checkpoint;
mod network;
mod params;

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{conv_extent, Padding};
use crate::ctc::Vocabulary;
use crate::tensor::TensorError;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use network::{dropout_mask, gated_block, split_logits, Network};
pub use params::{glorot_bound, param_shapes, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input width {width} is below the minimum of {min}")]
    TooNarrow { width: usize, min: usize },
    #[error("mix depth {0} is not 0 or a convolution row")]
    InvalidDepth(usize),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            _ => Err(ModelError::InvalidConfig(format!("unknown activation {s:?}"))),
        }
    }
}

/// One convolution row. Stride-1 rows use same padding, strided rows valid
/// padding. Gated rows keep their depth and multiply their input by the
/// squashed convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub gated: bool,
    pub out_depth: usize,
    pub filter: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvLayer {
    const fn conv(out_depth: usize, filter: (usize, usize), stride: (usize, usize)) -> Self {
        Self {
            gated: false,
            out_depth,
            filter,
            stride,
        }
    }

    const fn gated(depth: usize) -> Self {
        Self {
            gated: true,
            out_depth: depth,
            filter: (3, 3),
            stride: (1, 1),
        }
    }

    pub fn padding(&self) -> Padding {
        if self.stride == (1, 1) {
            Padding::Same
        } else {
            Padding::Valid
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Tiling,
    Conv,
    GatedConv,
    MaxPool,
    Blstm,
    Linear,
    Dropout,
    OutputProjection,
}

/// One row of the layer table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_depth: usize,
    pub out_depth: usize,
    pub filter: (usize, usize),
    pub stride: (usize, usize),
    /// 1-based position among convolution rows.
    pub ordinal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub preset: String,
    pub input_height: usize,
    pub tiling: (usize, usize),
    pub convs: Vec<ConvLayer>,
    /// Max-pool window; the stride is 1×1.
    pub pool: (usize, usize),
    pub decoder_width: usize,
    /// Label symbols; the blank is appended after them.
    pub vocabulary: String,
    pub dropout: f64,
    pub conv_activation: Activation,
    pub gate_activation: Activation,
}

impl NetworkConfig {
    /// The full-size network: height 128, depths 4 to 128, decoder 128.
    pub fn paper(vocabulary: &str) -> Self {
        let s = (4, 2);
        Self {
            preset: "paper".into(),
            input_height: 128,
            tiling: (2, 2),
            convs: vec![
                ConvLayer::conv(8, (3, 3), (1, 1)),
                ConvLayer::conv(16, s, s),
                ConvLayer::gated(16),
                ConvLayer::conv(32, (3, 3), (1, 1)),
                ConvLayer::gated(32),
                ConvLayer::conv(64, s, s),
                ConvLayer::gated(64),
                ConvLayer::conv(128, (3, 3), (1, 1)),
            ],
            pool: (4, 1),
            decoder_width: 128,
            vocabulary: vocabulary.into(),
            dropout: 0.5,
            conv_activation: Activation::Tanh,
            gate_activation: Activation::Sigmoid,
        }
    }

    /// Same topology at height 32 with halved depths and a 32-wide decoder.
    /// The strided rows use 2×2 filters and strides so the height chain is
    /// 32 → 16 → 8 → 4 → 1.
    pub fn tiny(vocabulary: &str) -> Self {
        let s = (2, 2);
        Self {
            preset: "tiny".into(),
            input_height: 32,
            tiling: (2, 2),
            convs: vec![
                ConvLayer::conv(4, (3, 3), (1, 1)),
                ConvLayer::conv(8, s, s),
                ConvLayer::gated(8),
                ConvLayer::conv(16, (3, 3), (1, 1)),
                ConvLayer::gated(16),
                ConvLayer::conv(32, s, s),
                ConvLayer::gated(32),
                ConvLayer::conv(64, (3, 3), (1, 1)),
            ],
            pool: (4, 1),
            decoder_width: 32,
            vocabulary: vocabulary.into(),
            dropout: 0.5,
            conv_activation: Activation::Tanh,
            gate_activation: Activation::Sigmoid,
        }
    }

    pub fn preset(name: &str, vocabulary: &str) -> Result<Self, ModelError> {
        match name {
            "paper" => Ok(Self::paper(vocabulary)),
            "tiny" => Ok(Self::tiny(vocabulary)),
            _ => Err(ModelError::InvalidConfig(format!(
                "unknown preset {name:?} (expected paper or tiny)"
            ))),
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary, ModelError> {
        Vocabulary::new(&self.vocabulary)
            .map_err(|e| ModelError::InvalidConfig(format!("vocabulary: {e}")))
    }

    /// Labels plus blank.
    pub fn num_classes(&self) -> usize {
        self.vocabulary.chars().count() + 1
    }

    pub fn tiled_depth(&self) -> usize {
        self.tiling.0 * self.tiling.1
    }

    pub fn encoder_depth(&self) -> usize {
        self.convs.last().map_or(self.tiled_depth(), |c| c.out_depth)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        self.vocab()?;
        if self.tiling.0 == 0 || self.tiling.1 == 0 {
            return bad("tiling factors must be positive".into());
        }
        if self.convs.is_empty() {
            return bad("at least one convolution row is required".into());
        }
        let mut depth = self.tiled_depth();
        for (k, c) in self.convs.iter().enumerate() {
            if c.gated && (c.out_depth != depth || c.stride != (1, 1)) {
                return bad(format!(
                    "gated row {} must keep depth {depth} with stride 1",
                    k + 1
                ));
            }
            if c.out_depth == 0 || c.filter.0 == 0 || c.filter.1 == 0 {
                return bad(format!("row {} has an empty filter or depth", k + 1));
            }
            if c.stride.0 == 0 || c.stride.1 == 0 {
                return bad(format!("row {} has a zero stride", k + 1));
            }
            depth = c.out_depth;
        }
        let h = self.encoder_height()?;
        if h != self.pool.0 {
            return bad(format!(
                "height {} reaches the pool as {h}, but the pool window is {}",
                self.input_height, self.pool.0
            ));
        }
        if self.pool.1 == 0 {
            return bad("pool window width must be positive".into());
        }
        if self.decoder_width < 2 || self.decoder_width % 2 != 0 {
            return bad(format!(
                "decoder width must be even and at least 2, got {}",
                self.decoder_width
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Height of the feature maps entering the max-pool.
    pub fn encoder_height(&self) -> Result<usize, ModelError> {
        let mut h = self.input_height / self.tiling.0;
        if h == 0 {
            return Err(ModelError::InvalidConfig("input height below tiling".into()));
        }
        for (k, c) in self.convs.iter().enumerate() {
            h = conv_extent(h, c.filter.0, c.stride.0, c.padding())
                .ok_or_else(|| {
                    ModelError::InvalidConfig(format!("height collapses at row {}", k + 1))
                })?
                .0;
        }
        Ok(h)
    }

    fn width_chain(&self, width: usize) -> Option<usize> {
        let mut w = width / self.tiling.1;
        if w == 0 {
            return None;
        }
        for c in &self.convs {
            w = conv_extent(w, c.filter.1, c.stride.1, c.padding())?.0;
        }
        (w >= self.pool.1).then(|| w - self.pool.1 + 1)
    }

    /// Smallest input width that yields at least one frame.
    pub fn min_width(&self) -> usize {
        (1..).find(|&w| self.width_chain(w).is_some()).expect("some width works")
    }

    /// Number of output frames for a padded input width.
    pub fn output_length(&self, width: usize) -> Result<usize, ModelError> {
        self.width_chain(width).ok_or(ModelError::TooNarrow {
            width,
            min: self.min_width(),
        })
    }

    /// Checks that every mix depth is 0 or a convolution ordinal.
    pub fn check_depths(&self, depths: &[usize]) -> Result<(), ModelError> {
        match depths.iter().find(|&&d| d > self.convs.len()) {
            Some(&d) => Err(ModelError::InvalidDepth(d)),
            None => Ok(()),
        }
    }

    /// The layer table, top to bottom, with dropout rows where dropout is
    /// applied.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let row = |kind, in_depth, out_depth, filter, stride, ordinal| LayerSpec {
            kind,
            in_depth,
            out_depth,
            filter,
            stride,
            ordinal,
        };
        let mut out = vec![row(
            LayerKind::Tiling,
            1,
            self.tiled_depth(),
            self.tiling,
            self.tiling,
            None,
        )];
        let mut depth = self.tiled_depth();
        for (k, c) in self.convs.iter().enumerate() {
            let kind = if c.gated {
                LayerKind::GatedConv
            } else {
                LayerKind::Conv
            };
            out.push(row(kind, depth, c.out_depth, c.filter, c.stride, Some(k + 1)));
            depth = c.out_depth;
        }
        out.push(row(LayerKind::MaxPool, depth, depth, self.pool, (1, 1), None));
        let one = (1, 1);
        let d = self.decoder_width;
        for kind in [
            LayerKind::Blstm,
            LayerKind::Linear,
            LayerKind::Blstm,
            LayerKind::Linear,
        ] {
            if self.dropout > 0.0 {
                out.push(row(LayerKind::Dropout, depth, depth, one, one, None));
            }
            out.push(row(kind, depth, d, one, one, None));
            depth = d;
        }
        out.push(row(
            LayerKind::OutputProjection,
            depth,
            self.num_classes(),
            one,
            one,
            None,
        ));
        out
    }

    /// Canonical `key=value` text; the vocabulary value is verbatim.
    pub fn to_text(&self) -> String {
        let pair = |(a, b): (usize, usize)| format!("{a}x{b}");
        let convs: Vec<String> = self
            .convs
            .iter()
            .map(|c| {
                format!(
                    "{}:{}:{}:{}",
                    if c.gated { "gated" } else { "conv" },
                    c.out_depth,
                    pair(c.filter),
                    pair(c.stride)
                )
            })
            .collect();
        format!(
            "preset={}\ninput_height={}\ntiling={}\nconvs={}\npool={}\ndecoder_width={}\n\
             vocabulary={}\ndropout={}\nconv_activation={}\ngate_activation={}\n",
            self.preset,
            self.input_height,
            pair(self.tiling),
            convs.join(","),
            pair(self.pool),
            self.decoder_width,
            self.vocabulary,
            self.dropout,
            self.conv_activation,
            self.gate_activation
        )
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::InvalidConfig(m);
        let pair = |v: &str| -> Result<(usize, usize), ModelError> {
            let (a, b) = v
                .split_once('x')
                .ok_or_else(|| bad(format!("expected AxB, got {v:?}")))?;
            let n = |s: &str| s.parse().map_err(|_| bad(format!("bad number in {v:?}")));
            Ok((n(a)?, n(b)?))
        };
        let mut c = Self::tiny("");
        let mut seen = std::collections::HashSet::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            seen.insert(k.to_string());
            let num = || v.parse().map_err(|_| bad(format!("bad value for {k}: {v:?}")));
            match k {
                "preset" => c.preset = v.to_string(),
                "input_height" => c.input_height = num()?,
                "tiling" => c.tiling = pair(v)?,
                "convs" => {
                    c.convs = v
                        .split(',')
                        .map(|spec| {
                            let parts: Vec<&str> = spec.split(':').collect();
                            let [kind, depth, filter, stride] = parts[..] else {
                                return Err(bad(format!("bad conv spec {spec:?}")));
                            };
                            Ok(ConvLayer {
                                gated: match kind {
                                    "gated" => true,
                                    "conv" => false,
                                    _ => return Err(bad(format!("bad conv kind {kind:?}"))),
                                },
                                out_depth: depth
                                    .parse()
                                    .map_err(|_| bad(format!("bad depth {depth:?}")))?,
                                filter: pair(filter)?,
                                stride: pair(stride)?,
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                "pool" => c.pool = pair(v)?,
                "decoder_width" => c.decoder_width = num()?,
                "vocabulary" => c.vocabulary = v.to_string(),
                "dropout" => c.dropout = v.parse().map_err(|_| bad(format!("bad dropout {v:?}")))?,
                "conv_activation" => c.conv_activation = v.parse()?,
                "gate_activation" => c.gate_activation = v.parse()?,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        for key in ["preset", "input_height", "convs", "vocabulary"] {
            if !seen.contains(key) {
                return Err(bad(format!("missing key {key}")));
            }
        }
        Ok(c)
    }

    /// SHA-256 of [`NetworkConfig::to_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}
