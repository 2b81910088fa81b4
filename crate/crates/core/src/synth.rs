//! Synthetic irrigation scenes with exact ground truth.
//!
//! Sprinkler (center-pivot) fields are discs carrying concentric ring
//! texture; flood fields are axis-aligned rectangles carrying furrow
//! stripes. Textures alternate at a two-pixel period and are zero-mean per
//! field, so class means equal the spectral profile.
//!
//! Per-tile seeds: `tile_seed(seed, i) = splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patchify::other_fraction;
use crate::raster::{self, BandId, IrrigationClass, LabelMask, MultispectralImage, RasterError, ValueDomain};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot place {requested} fields within coverage cap {cap}")]
    OverfullScene { requested: usize, cap: f64 },
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 2 tiles, got {0}")]
    TooFewTiles(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean and per-pixel noise of one class in every canonical band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub mean: [f32; 7],
    pub sigma: [f32; 7],
    /// Texture amplitude per band.
    pub texture: [f32; 7],
}

/// Indexed by class code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub classes: [ClassProfile; 3],
}

const NIR: usize = 5;

impl SpectralProfile {
    /// Classes distinguishable in every band.
    pub fn standard(noise_sigma: f32) -> Self {
        let s = [noise_sigma; 7];
        Self {
            classes: [
                ClassProfile {
                    mean: [0.30, 0.35, 0.40, 0.50, 0.45, 0.35, 0.55],
                    sigma: s,
                    texture: [0.0; 7],
                },
                ClassProfile {
                    mean: [0.34, 0.42, 0.33, 0.42, 0.36, 0.55, 0.46],
                    sigma: s,
                    texture: [0.04; 7],
                },
                ClassProfile {
                    mean: [0.26, 0.46, 0.30, 0.45, 0.40, 0.65, 0.50],
                    sigma: s,
                    texture: [0.04; 7],
                },
            ],
        }
    }

    /// Flood differs from background only in NIR (mean and texture).
    pub fn nir_only(noise_sigma: f32) -> Self {
        let mut p = Self::standard(noise_sigma);
        let other = p.classes[0].clone();
        let flood = &mut p.classes[1];
        for b in 0..7 {
            if b != NIR {
                flood.mean[b] = other.mean[b];
                flood.texture[b] = other.texture[b];
            }
        }
        flood.mean[NIR] = other.mean[NIR] + 0.25;
        flood.texture[NIR] = 0.03;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub size: (usize, usize),
    pub bands: Vec<BandId>,
    pub n_pivots: usize,
    pub n_floods: usize,
    /// Inclusive pivot radius range in pixels.
    pub pivot_radius: (usize, usize),
    /// Inclusive flood side-length range in pixels.
    pub flood_side: (usize, usize),
    pub nir_only_class: bool,
    pub noise_sigma: f32,
    /// Overrides the built-in profile when set.
    pub spectral_profile: Option<SpectralProfile>,
    /// Maximum fraction of the scene covered by fields.
    pub coverage_cap: f64,
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: (256, 256),
            bands: BandId::CANONICAL.to_vec(),
            n_pivots: 5,
            n_floods: 5,
            pivot_radius: (16, 32),
            flood_side: (24, 56),
            nir_only_class: false,
            noise_sigma: 0.05,
            spectral_profile: None,
            coverage_cap: 0.6,
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn profile(&self) -> SpectralProfile {
        match &self.spectral_profile {
            Some(p) => p.clone(),
            None if self.nir_only_class => SpectralProfile::nir_only(self.noise_sigma),
            None => SpectralProfile::standard(self.noise_sigma),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let (h, w) = self.size;
        if h == 0 || w == 0 {
            return bad("empty scene".into());
        }
        if self.bands.is_empty() {
            return bad("no bands".into());
        }
        let (r0, r1) = self.pivot_radius;
        if r0 == 0 || r0 > r1 || 2 * r1 + 1 > h.min(w) {
            return bad(format!("pivot radius range {r0}..={r1} does not fit {h}x{w}"));
        }
        let (s0, s1) = self.flood_side;
        if s0 == 0 || s0 > s1 || s1 > h.min(w) {
            return bad(format!("flood side range {s0}..={s1} does not fit {h}x{w}"));
        }
        if !(0.0..=1.0).contains(&self.coverage_cap) {
            return bad("coverage_cap must lie in [0, 1]".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    /// Background fraction implied by the expected field areas.
    pub fn implied_other_fraction(&self) -> f64 {
        let mean_sq = |(a, b): (usize, usize)| {
            let n = (b - a + 1) as f64;
            (a..=b).map(|v| (v * v) as f64).sum::<f64>() / n
        };
        let mean = |(a, b): (usize, usize)| (a + b) as f64 / 2.0;
        let disc = PI * mean_sq(self.pivot_radius);
        let rect = mean(self.flood_side).powi(2);
        let area = (self.size.0 * self.size.1) as f64;
        1.0 - (self.n_pivots as f64 * disc + self.n_floods as f64 * rect) / area
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pivot {
    pub center: (usize, usize),
    pub radius: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloodField {
    pub origin: (usize, usize),
    pub height: usize,
    pub width: usize,
    /// Furrows run along rows when true, along columns otherwise.
    pub horizontal: bool,
}

/// Field geometry of one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub pivots: Vec<Pivot>,
    pub floods: Vec<FloodField>,
}

impl Pivot {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dy = r as i64 - self.center.0 as i64;
        let dx = c as i64 - self.center.1 as i64;
        dy * dy + dx * dx <= (self.radius * self.radius) as i64
    }
}

/// Splittable per-tile seed.
pub fn tile_seed(seed: u64, index: usize) -> u64 {
    crate::seed::derive(seed, index as u64)
}

const MAX_ATTEMPTS: usize = 2000;

fn place_fields(params: &SceneParams, rng: &mut ChaCha8Rng) -> Result<(SceneLayout, Array2<u8>), SynthError> {
    let (h, w) = params.size;
    let requested = params.n_pivots + params.n_floods;
    let cap = params.coverage_cap;
    let overfull = || SynthError::OverfullScene { requested, cap };
    let mut mask = Array2::<u8>::zeros((h, w));
    // Occupied pixels include a one-pixel margin around every field.
    let mut taken = Array2::<bool>::from_elem((h, w), false);
    let mut covered = 0usize;
    let mut layout = SceneLayout::default();

    let claim = |pixels: &[(usize, usize)], class: IrrigationClass, mask: &mut Array2<u8>, taken: &mut Array2<bool>| -> bool {
        if pixels.iter().any(|&p| taken[p]) {
            return false;
        }
        for &(r, c) in pixels {
            mask[(r, c)] = class.code();
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        taken[(rr as usize, cc as usize)] = true;
                    }
                }
            }
        }
        true
    };

    for _ in 0..params.n_pivots {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let radius = rng.random_range(params.pivot_radius.0..=params.pivot_radius.1);
            let center = (rng.random_range(radius..h - radius), rng.random_range(radius..w - radius));
            let pivot = Pivot { center, radius };
            let pixels: Vec<_> = (center.0 - radius..=center.0 + radius)
                .flat_map(|r| (center.1 - radius..=center.1 + radius).map(move |c| (r, c)))
                .filter(|&(r, c)| pivot.contains(r, c))
                .collect();
            if (covered + pixels.len()) as f64 > cap * (h * w) as f64 {
                return Err(overfull());
            }
            if claim(&pixels, IrrigationClass::Sprinkler, &mut mask, &mut taken) {
                covered += pixels.len();
                layout.pivots.push(pivot);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(overfull());
        }
    }
    for _ in 0..params.n_floods {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let fh = rng.random_range(params.flood_side.0..=params.flood_side.1);
            let fw = rng.random_range(params.flood_side.0..=params.flood_side.1);
            let origin = (rng.random_range(0..=h - fh), rng.random_range(0..=w - fw));
            let horizontal = rng.random::<bool>();
            let pixels: Vec<_> = (origin.0..origin.0 + fh)
                .flat_map(|r| (origin.1..origin.1 + fw).map(move |c| (r, c)))
                .collect();
            if (covered + pixels.len()) as f64 > cap * (h * w) as f64 {
                return Err(overfull());
            }
            if claim(&pixels, IrrigationClass::Flood, &mut mask, &mut taken) {
                covered += pixels.len();
                layout.floods.push(FloodField {
                    origin,
                    height: fh,
                    width: fw,
                    horizontal,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(overfull());
        }
    }
    Ok((layout, mask))
}

/// Generates one scene and returns its field layout alongside.
pub fn generate_scene_with_layout(params: &SceneParams) -> Result<(MultispectralImage, LabelMask, SceneLayout), SynthError> {
    params.validate()?;
    let bands = raster::canonical_bands(&params.bands)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (layout, labels) = place_fields(params, &mut rng)?;
    let profile = params.profile();
    let (h, w) = params.size;

    // Zero-mean texture sign per pixel: each field's pattern has its own
    // mean removed.
    let mut pattern = Array2::<f32>::zeros((h, w));
    for p in &layout.pivots {
        let mut px = Vec::new();
        for r in p.center.0 - p.radius..=p.center.0 + p.radius {
            for c in p.center.1 - p.radius..=p.center.1 + p.radius {
                if p.contains(r, c) {
                    let d = ((r as f64 - p.center.0 as f64).powi(2) + (c as f64 - p.center.1 as f64).powi(2)).sqrt();
                    let v = if (d.round() as i64) % 2 == 0 { 1.0 } else { -1.0 };
                    px.push(((r, c), v));
                }
            }
        }
        apply_zero_mean(&mut pattern, &px);
    }
    for f in &layout.floods {
        let mut px = Vec::new();
        for r in f.origin.0..f.origin.0 + f.height {
            for c in f.origin.1..f.origin.1 + f.width {
                let k = if f.horizontal { r } else { c };
                px.push(((r, c), if k % 2 == 0 { 1.0 } else { -1.0 }));
            }
        }
        apply_zero_mean(&mut pattern, &px);
    }

    let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut data = Array3::<f32>::zeros((h, w, bands.len()));
    for r in 0..h {
        for c in 0..w {
            let cls = &profile.classes[labels[(r, c)] as usize];
            for (j, band) in bands.iter().enumerate() {
                let b = band.code() as usize;
                let noise = std_normal.sample(&mut rng) * cls.sigma[b];
                let v = cls.mean[b] + cls.texture[b] * pattern[(r, c)] + noise;
                data[(r, c, j)] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = MultispectralImage::new(data, bands, ValueDomain::UnitNormalized)?;
    let mask = LabelMask::new(labels)?;
    Ok((image, mask, layout))
}

fn apply_zero_mean(pattern: &mut Array2<f32>, px: &[((usize, usize), f32)]) {
    if px.is_empty() {
        return;
    }
    let mean = px.iter().map(|(_, v)| *v as f64).sum::<f64>() / px.len() as f64;
    for &(p, v) in px {
        pattern[p] = (v as f64 - mean) as f32;
    }
}

pub fn generate_scene(params: &SceneParams) -> Result<(MultispectralImage, LabelMask), SynthError> {
    generate_scene_with_layout(params).map(|(i, m, _)| (i, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub tile_id: usize,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub seed: u64,
    pub other_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub params: SceneParams,
    pub tiles: Vec<TileEntry>,
}

pub const DATASET_MANIFEST: &str = "tiles.json";

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = fs::read_to_string(dir.as_ref().join(DATASET_MANIFEST))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `n_tiles` scenes as PSEG archives plus a JSON manifest into `out_dir`.
pub fn generate_dataset(n_tiles: usize, template: &SceneParams, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, SynthError> {
    if n_tiles < 2 {
        return Err(SynthError::TooFewTiles(n_tiles));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut tiles = Vec::with_capacity(n_tiles);
    for i in 0..n_tiles {
        let params = SceneParams {
            seed: tile_seed(seed, i),
            ..template.clone()
        };
        let (img, mask) = generate_scene(&params)?;
        let rel = PathBuf::from(format!("tile_{i:04}.pseg"));
        raster::save_labeled(&img, &mask, out_dir.join(&rel), raster::RasterFormat::Archive)?;
        tiles.push(TileEntry {
            tile_id: i,
            path: rel,
            seed: params.seed,
            other_fraction: other_fraction(&mask),
        });
    }
    let manifest = DatasetManifest {
        seed,
        params: template.clone(),
        tiles,
    };
    fs::write(out_dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
