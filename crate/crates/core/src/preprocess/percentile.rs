use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::raster::{BandId, MultispectralImage, ValueDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizeParams {
    pub p_low: f64,
    pub p_high: f64,
    pub per_band: bool,
    /// Fail on a degenerate range instead of zero-filling the band.
    pub strict: bool,
}

impl Default for NormalizeParams {
    fn default() -> Self {
        Self {
            p_low: 2.0,
            p_high: 98.0,
            per_band: true,
            strict: false,
        }
    }
}

impl NormalizeParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let ok = (0.0..100.0).contains(&self.p_low)
            && self.p_high > 0.0
            && self.p_high <= 100.0
            && self.p_low < self.p_high;
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::InvalidParams(format!(
                "need 0 <= p_low < p_high <= 100, got {} / {}",
                self.p_low, self.p_high
            )))
        }
    }
}

/// Normalized image plus the bands whose range collapsed to a point.
#[derive(Clone, Debug)]
pub struct NormalizeOutcome {
    pub image: MultispectralImage,
    pub degenerate_bands: Vec<BandId>,
}

/// Percentile of `sorted` (ascending) using linear interpolation between
/// order statistics at rank `p/100 * (n-1)`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn bounds(values: &mut [f64], params: &NormalizeParams) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    (percentile(values, params.p_low), percentile(values, params.p_high))
}

/// Clips each band to its `[p_low, p_high]` percentile range and rescales
/// to `[0, 1]`.
pub fn percentile_normalize(
    img: &MultispectralImage,
    params: &NormalizeParams,
) -> Result<NormalizeOutcome, PreprocessError> {
    params.validate()?;
    if img.value_domain() != ValueDomain::RawReflectance {
        return Err(PreprocessError::NotRawReflectance);
    }
    let data = img.data();
    for (b, band) in img.bands().iter().enumerate() {
        if data.index_axis(Axis(2), b).iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::NonFinite(*band));
        }
    }

    let c = img.n_bands();
    let ranges: Vec<(f64, f64)> = if params.per_band {
        (0..c)
            .map(|b| {
                let mut v: Vec<f64> = data.index_axis(Axis(2), b).iter().map(|&x| x as f64).collect();
                bounds(&mut v, params)
            })
            .collect()
    } else {
        let mut v: Vec<f64> = data.iter().map(|&x| x as f64).collect();
        vec![bounds(&mut v, params); c]
    };

    let mut degenerate = Vec::new();
    for (b, &(lo, hi)) in ranges.iter().enumerate() {
        if hi <= lo {
            let band = img.bands()[b];
            if params.strict {
                return Err(PreprocessError::DegenerateRange(band));
            }
            log::warn!("band {band}: percentile range collapsed ({lo}); zero-filling");
            degenerate.push(band);
        }
    }

    let out = Array3::from_shape_fn(data.dim(), |(r, q, b)| {
        let (lo, hi) = ranges[b];
        if hi <= lo {
            0.0
        } else {
            ((data[[r, q, b]] as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
        }
    });
    Ok(NormalizeOutcome {
        image: img.with_data(out, ValueDomain::UnitNormalized)?,
        degenerate_bands: degenerate,
    })
}
