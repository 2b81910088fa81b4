//! Contrast-limited adaptive histogram equalization, one band at a time.
//!
//! Values in `[0, 1]` are quantized to `u16`, binned into `n_bins`, and each
//! tile of the grid gets a clipped-histogram equalization table. A pixel's
//! output is the bilinear blend of the tables of the four tiles whose
//! centers surround it (nearest tiles at the borders). Table entries use
//! the mid-step of the cumulative histogram,
//! `(cdf(b-1) + cdf(b)) / 2 / N`, so a bin holding all of a tile's mass maps
//! near its own center rather than to 1.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::raster::{BandId, MultispectralImage, ValueDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    /// Per-bin cap as a fraction of the tile's pixel count.
    pub clip_limit: f64,
    /// (rows, cols)
    pub tile_grid: (usize, usize),
    pub n_bins: usize,
    /// Bands to equalize; `None` means every band.
    pub bands: Option<Vec<BandId>>,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 0.01,
            tile_grid: (8, 8),
            n_bins: 256,
            bands: None,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.clip_limit > 0.0) {
            return Err(PreprocessError::InvalidParams("clip_limit must be > 0".into()));
        }
        if self.tile_grid.0 == 0 || self.tile_grid.1 == 0 {
            return Err(PreprocessError::InvalidParams("tile grid dims must be >= 1".into()));
        }
        if self.n_bins < 2 || self.n_bins > 65536 {
            return Err(PreprocessError::InvalidParams("n_bins must be in [2, 65536]".into()));
        }
        Ok(())
    }
}

fn quantize(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

fn dequantize(q: u16) -> f32 {
    (q as f64 / 65535.0) as f32
}

fn bin_of(q: u16, n_bins: usize) -> usize {
    (q as usize * n_bins) >> 16
}

/// Row or column boundaries of `n` tiles over `len` pixels.
fn tile_edges(len: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|t| t * len / n).collect()
}

fn tile_lut(hist: &mut [f64], n_pixels: usize, clip_limit: f64) -> Vec<f64> {
    let n_bins = hist.len();
    let limit = clip_limit * n_pixels as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let share = excess / n_bins as f64;
    let total = n_pixels as f64;
    let mut lut = Vec::with_capacity(n_bins);
    let mut below = 0.0;
    for h in hist.iter() {
        let h = h + share;
        lut.push(((below + 0.5 * h) / total).clamp(0.0, 1.0));
        below += h;
    }
    lut
}

/// Equalization tables of one band, indexed `[tile_row][tile_col][bin]`.
pub fn clahe_tile_luts(
    img: &MultispectralImage,
    band: BandId,
    params: &ClaheParams,
) -> Result<Vec<Vec<Vec<f64>>>, PreprocessError> {
    params.validate()?;
    let b = img
        .band_index(band)
        .ok_or(crate::raster::RasterError::MissingBand(band))?;
    check_grid(img, params)?;
    let (h, w, _) = img.data().dim();
    let q: Vec<u16> = (0..h * w)
        .map(|i| quantize(img.data()[[i / w, i % w, b]]))
        .collect();
    Ok(luts_for_plane(&q, h, w, params))
}

fn check_grid(img: &MultispectralImage, params: &ClaheParams) -> Result<(), PreprocessError> {
    let (rows, cols) = params.tile_grid;
    if img.height() < rows || img.width() < cols {
        return Err(PreprocessError::ImageSmallerThanGrid {
            h: img.height(),
            w: img.width(),
            rows,
            cols,
        });
    }
    Ok(())
}

fn luts_for_plane(q: &[u16], h: usize, w: usize, params: &ClaheParams) -> Vec<Vec<Vec<f64>>> {
    let (rows, cols) = params.tile_grid;
    let re = tile_edges(h, rows);
    let ce = tile_edges(w, cols);
    (0..rows)
        .map(|tr| {
            (0..cols)
                .map(|tc| {
                    let mut hist = vec![0.0f64; params.n_bins];
                    for r in re[tr]..re[tr + 1] {
                        for c in ce[tc]..ce[tc + 1] {
                            hist[bin_of(q[r * w + c], params.n_bins)] += 1.0;
                        }
                    }
                    let n = (re[tr + 1] - re[tr]) * (ce[tc + 1] - ce[tc]);
                    tile_lut(&mut hist, n, params.clip_limit)
                })
                .collect()
        })
        .collect()
}

/// Interpolation neighbours along one axis: for each pixel index, the two
/// tile indices and the weight of the second.
fn axis_weights(len: usize, n: usize) -> Vec<(usize, usize, f64)> {
    let edges = tile_edges(len, n);
    let centers: Vec<f64> = (0..n)
        .map(|t| (edges[t] + edges[t + 1]) as f64 / 2.0 - 0.5)
        .collect();
    (0..len)
        .map(|i| {
            let x = i as f64;
            if n == 1 || x <= centers[0] {
                return (0, 0, 0.0);
            }
            if x >= centers[n - 1] {
                return (n - 1, n - 1, 0.0);
            }
            let t = centers.iter().rposition(|&c| c <= x).unwrap();
            let wgt = (x - centers[t]) / (centers[t + 1] - centers[t]);
            (t, t + 1, wgt)
        })
        .collect()
}

pub fn clahe_equalize(
    img: &MultispectralImage,
    params: &ClaheParams,
) -> Result<MultispectralImage, PreprocessError> {
    params.validate()?;
    if img.value_domain() != ValueDomain::UnitNormalized {
        return Err(PreprocessError::NotUnitNormalized);
    }
    check_grid(img, params)?;
    let targets: Vec<usize> = match &params.bands {
        None => (0..img.n_bands()).collect(),
        Some(list) => list
            .iter()
            .map(|&b| img.band_index(b).ok_or(crate::raster::RasterError::MissingBand(b)))
            .collect::<Result<_, _>>()?,
    };
    let (h, w, nb) = img.data().dim();
    let (rows, cols) = params.tile_grid;
    let rw = axis_weights(h, rows);
    let cw = axis_weights(w, cols);
    let mut out: Array3<f32> = img.data().clone();

    for b in targets {
        let q: Vec<u16> = (0..h * w).map(|i| quantize(img.data()[[i / w, i % w, b]])).collect();
        let luts = luts_for_plane(&q, h, w, params);
        for r in 0..h {
            let (r0, r1, wy) = rw[r];
            for c in 0..w {
                let (c0, c1, wx) = cw[c];
                let bin = bin_of(q[r * w + c], params.n_bins);
                let top = luts[r0][c0][bin] * (1.0 - wx) + luts[r0][c1][bin] * wx;
                let bottom = luts[r1][c0][bin] * (1.0 - wx) + luts[r1][c1][bin] * wx;
                let v = top * (1.0 - wy) + bottom * wy;
                out[[r, c, b]] = dequantize((v.clamp(0.0, 1.0) * 65535.0).round() as u16);
            }
        }
    }
    debug_assert_eq!(out.dim().2, nb);
    Ok(img.with_data(out, ValueDomain::UnitNormalized)?)
}
