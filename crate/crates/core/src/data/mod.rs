//! Synthetic line images, preprocessing, width-bucketed batching and the
//! on-disk dataset format.

pub mod batch;
pub mod font;
pub mod io;
pub mod render;

use thiserror::Error;

pub use batch::{
    assemble_batch, bucket_batches, partition_by_width, prepare_lines, preprocess, rescale,
    standardize, Batch, PreparedLine, VARIANCE_FLOOR,
};
pub use io::{
    generate_dataset, load_dataset, load_split, parse_manifest, read_genconfig, read_pgm,
    save_split, write_dataset, write_pgm, GenConfig, Split,
};
pub use render::{render_line, RenderStyle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("no glyph for character {0:?}")]
    UnknownGlyph(char),
    #[error("cannot render an empty line")]
    EmptyText,
    #[error("invalid render style: {0}")]
    InvalidStyle(String),
    #[error("image {height}x{width} does not match {len} pixels")]
    BadImage {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("transcript {0:?} uses a character outside the vocabulary")]
    OutOfVocabulary(String),
    #[error("malformed manifest {path}, row {row}: {reason}")]
    MalformedManifest {
        path: String,
        row: usize,
        reason: String,
    },
    #[error("malformed PGM {path} at byte {offset}: {reason}")]
    MalformedPgm {
        path: String,
        offset: usize,
        reason: String,
    },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}

/// 8-bit grayscale text-line image; 0 is black ink, 255 white paper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values.
    pub pixels: Vec<u8>,
    pub transcript: String,
}

impl LineImage {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        transcript: String,
    ) -> Result<Self, DataError> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(DataError::BadImage {
                height,
                width,
                len: pixels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
            transcript,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}
