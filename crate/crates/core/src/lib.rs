//! Progressive patch-size segmentation training for multispectral
//! irrigation mapping.

pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patchify;
pub mod preprocess;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod train;
