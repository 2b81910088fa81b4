//! Radiometric preprocessing: percentile clip-normalization followed by
//! per-band CLAHE.

mod clahe;
mod percentile;

pub use clahe::{clahe_equalize, clahe_tile_luts, ClaheParams};
pub use percentile::{percentile, percentile_normalize, NormalizeOutcome, NormalizeParams};

use thiserror::Error;

use crate::raster::{BandId, RasterError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("percentile normalization expects RAW_REFLECTANCE input")]
    NotRawReflectance,
    #[error("CLAHE expects UNIT_NORMALIZED input")]
    NotUnitNormalized,
    #[error("band {0} has a degenerate percentile range")]
    DegenerateRange(BandId),
    #[error("image {h}x{w} is smaller than the {rows}x{cols} tile grid")]
    ImageSmallerThanGrid {
        h: usize,
        w: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite pixel value in band {0}")]
    NonFinite(BandId),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}
