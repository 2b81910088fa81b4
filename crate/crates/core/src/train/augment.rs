//! Train-time augmentation.
//!
//! Geometric transforms act about the patch center and are applied to image
//! and mask through one inverse map: the image is sampled bilinearly with
//! reflect padding, the mask by nearest neighbour with OTHER outside the
//! source. Photometric transforms touch the image only.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::patchify::Patch;
use crate::raster::{IrrigationClass, LabelMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Degrees, `(min, max)`.
    pub rotation: (f64, f64),
    /// Scale factors, `(min, max)`.
    pub zoom: (f64, f64),
    /// Maximum multiplicative brightness change.
    pub brightness: f64,
    /// Maximum contrast change about the band mean.
    pub contrast: f64,
    /// Maximum shift as a fraction of the patch side.
    pub translation: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rotation: (-20.0, 30.0),
            zoom: (0.8, 1.3),
            brightness: 0.2,
            contrast: 0.2,
            translation: 0.05,
            seed: 0,
        }
    }
}

impl AugmentParams {
    /// Flips only.
    pub fn flips_only() -> Self {
        Self {
            rotation: (0.0, 0.0),
            zoom: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            translation: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rotation.0 > self.rotation.1 {
            return Err("rotation range is reversed".into());
        }
        if !(self.zoom.0 > 0.0 && self.zoom.0 <= self.zoom.1) {
            return Err("zoom range must be positive and ordered".into());
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("translation", self.translation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One sampled geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub zoom: f64,
    /// `(rows, cols)` in pixels.
    pub shift: (f64, f64),
}

impl GeometricDraw {
    pub const IDENTITY: GeometricDraw = GeometricDraw {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
        zoom: 1.0,
        shift: (0.0, 0.0),
    };

    /// Source coordinate (row, col) sampled by output pixel `(r, c)`.
    pub fn preimage(&self, r: usize, c: usize, size: usize) -> (f64, f64) {
        let half = size as f64 / 2.0;
        let mut y = r as f64 + 0.5 - half - self.shift.0;
        let mut x = c as f64 + 0.5 - half - self.shift.1;
        y /= self.zoom;
        x /= self.zoom;
        let (s, co) = self.angle_deg.to_radians().sin_cos();
        (y, x) = (co * y - s * x, s * y + co * x);
        if self.vflip {
            y = -y;
        }
        if self.hflip {
            x = -x;
        }
        (y + half - 0.5, x + half - 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricDraw {
    pub brightness: f64,
    pub contrast: f64,
}

impl PhotometricDraw {
    pub const IDENTITY: PhotometricDraw = PhotometricDraw {
        brightness: 1.0,
        contrast: 1.0,
    };
}

/// Samples a transform for a `size`-pixel patch.
pub fn draw<R: Rng>(params: &AugmentParams, size: usize, rng: &mut R) -> (GeometricDraw, PhotometricDraw) {
    let uniform = |rng: &mut R, (a, b): (f64, f64)| if a < b { rng.random_range(a..=b) } else { a };
    let hflip = params.hflip && rng.random::<bool>();
    let vflip = params.vflip && rng.random::<bool>();
    let angle_deg = uniform(rng, params.rotation);
    let zoom = uniform(rng, params.zoom);
    let t = params.translation * size as f64;
    let dy = uniform(rng, (-t, t));
    let dx = uniform(rng, (-t, t));
    let brightness = 1.0 + uniform(rng, (-params.brightness, params.brightness));
    let contrast = 1.0 + uniform(rng, (-params.contrast, params.contrast));
    (
        GeometricDraw {
            hflip,
            vflip,
            angle_deg,
            zoom,
            shift: (dy, dx),
        },
        PhotometricDraw { brightness, contrast },
    )
}

/// Reflects `v` about the first and last pixel centers into `[0, n-1]`.
fn reflect(mut v: f64, n: usize) -> f64 {
    let last = (n - 1) as f64;
    if last == 0.0 {
        return 0.0;
    }
    let period = 2.0 * last;
    v = v.rem_euclid(period);
    if v > last {
        period - v
    } else {
        v
    }
}

pub fn apply_geometric(patch: &Patch, g: &GeometricDraw) -> Patch {
    let s = patch.size;
    let src = patch.image.data();
    let bands = src.dim().2;
    let mask = patch.mask.data();
    let mut img = Array3::<f32>::zeros((s, s, bands));
    let mut out_mask = Array2::<u8>::from_elem((s, s), IrrigationClass::Other.code());
    for r in 0..s {
        for c in 0..s {
            let (y, x) = g.preimage(r, c, s);
            let (ny, nx) = (y.round(), x.round());
            if ny >= 0.0 && nx >= 0.0 && ny < s as f64 && nx < s as f64 {
                out_mask[(r, c)] = mask[(ny as usize, nx as usize)];
            }
            let (yy, xx) = (reflect(y, s), reflect(x, s));
            let (y0, x0) = (yy.floor() as usize, xx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
            let (ty, tx) = ((yy - y0 as f64) as f32, (xx - x0 as f64) as f32);
            for b in 0..bands {
                let top = src[(y0, x0, b)] * (1.0 - tx) + src[(y0, x1, b)] * tx;
                let bot = src[(y1, x0, b)] * (1.0 - tx) + src[(y1, x1, b)] * tx;
                img[(r, c, b)] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Patch {
        image: patch.image.with_data(img, patch.image.value_domain()).expect("same shape"),
        mask: LabelMask::new(out_mask).expect("valid classes"),
        ..patch.clone()
    }
}

pub fn apply_photometric(patch: &Patch, p: &PhotometricDraw) -> Patch {
    let mut img = patch.image.data().clone();
    let b = p.brightness as f32;
    let c = p.contrast as f32;
    let n = (img.dim().0 * img.dim().1) as f64;
    for mut band in img.axis_iter_mut(ndarray::Axis(2)) {
        band.mapv_inplace(|v| v * b);
        let mean = (band.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        band.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
    }
    Patch {
        image: patch.image.with_data(img, patch.image.value_domain()).expect("same shape"),
        ..patch.clone()
    }
}

/// Mirrors columns exactly.
pub fn hflip(patch: &Patch) -> Patch {
    apply_geometric(
        patch,
        &GeometricDraw {
            hflip: true,
            ..GeometricDraw::IDENTITY
        },
    )
}

pub fn augment<R: Rng>(patch: &Patch, params: &AugmentParams, rng: &mut R) -> Patch {
    let (g, p) = draw(params, patch.size, rng);
    let out = if g == GeometricDraw::IDENTITY {
        patch.clone()
    } else {
        apply_geometric(patch, &g)
    };
    if p == PhotometricDraw::IDENTITY {
        out
    } else {
        apply_photometric(&out, &p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchify::PatchOrigin;
    use crate::raster::{BandId, MultispectralImage, ValueDomain};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(s: usize, f: impl Fn(usize, usize, usize) -> f32, m: impl Fn(usize, usize) -> u8) -> Patch {
        Patch {
            image: MultispectralImage::new(
                Array3::from_shape_fn((s, s, 2), |(r, c, b)| f(r, c, b)),
                vec![BandId::Red, BandId::Nir],
                ValueDomain::UnitNormalized,
            )
            .unwrap(),
            mask: LabelMask::new(Array2::from_shape_fn((s, s), |(r, c)| m(r, c))).unwrap(),
            origin: PatchOrigin {
                tile_id: 0,
                row_off: 0,
                col_off: 0,
            },
            size: s,
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let p = patch(8, |r, c, b| (r * 8 + c) as f32 / 64.0 + b as f32 * 0.01, |r, c| ((r + 2 * c) % 3) as u8);
        let once = hflip(&p);
        assert_eq!(once.mask.data()[(1, 0)], p.mask.data()[(1, 7)]);
        assert_eq!(once.image.data()[(2, 1, 1)], p.image.data()[(2, 6, 1)]);
        assert_eq!(hflip(&once), p);
    }

    #[test]
    fn brightness_scales_constant_image() {
        let p = patch(4, |_, _, _| 0.5, |_, _| 0);
        let out = apply_photometric(
            &p,
            &PhotometricDraw {
                brightness: 1.2,
                contrast: 1.0,
            },
        );
        assert!(out.image.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn photometric_output_is_clamped() {
        let p = patch(4, |r, _, _| r as f32 / 3.0, |_, _| 0);
        let out = apply_photometric(
            &p,
            &PhotometricDraw {
                brightness: 1.2,
                contrast: 1.2,
            },
        );
        assert!(out.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out.mask, p.mask);
    }

    #[test]
    fn random_draws_stay_in_range() {
        let params = AugmentParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (g, p) = draw(&params, 64, &mut rng);
            assert!((-20.0..=30.0).contains(&g.angle_deg));
            assert!((0.8..=1.3).contains(&g.zoom));
            assert!(g.shift.0.abs() <= 3.2 && g.shift.1.abs() <= 3.2);
            assert!((0.8..=1.2).contains(&p.brightness) && (0.8..=1.2).contains(&p.contrast));
        }
    }
}
