//! Patch extraction, class-balance filtering and tile-level splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{
    self, BandId, IrrigationClass, LabelMask, MultispectralImage, RasterError, RasterFormat,
};

/// Tiles whose OTHER share exceeds this are dropped.
pub const TILE_OTHER_THRESHOLD: f64 = 0.90;
/// Sub-tile patches whose OTHER share exceeds this are dropped.
pub const PATCH_OTHER_THRESHOLD: f64 = 0.80;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("image {h}x{w} is not divisible into {size}x{size} patches")]
    IndivisibleDimensions { h: usize, w: usize, size: usize },
    #[error("split needs at least one tile on each side ({n} tiles, ratio {ratio})")]
    TooFewTiles { n: usize, ratio: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("patch set mismatch: {0}")]
    SetMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub tile_id: usize,
    pub row_off: usize,
    pub col_off: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: MultispectralImage,
    pub mask: LabelMask,
    pub origin: PatchOrigin,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Patches of one size and band set belonging to one split.
#[derive(Clone, Debug)]
pub struct PatchSet {
    patches: Vec<Patch>,
    size: usize,
    band_set: Vec<BandId>,
    split: Split,
}

impl PatchSet {
    pub fn new(
        patches: Vec<Patch>,
        size: usize,
        band_set: Vec<BandId>,
        split: Split,
    ) -> Result<Self, PatchError> {
        for p in &patches {
            if p.size != size || p.image.height() != size || p.image.width() != size {
                return Err(PatchError::SetMismatch(format!(
                    "patch {:?} has size {} in a {size} set",
                    p.origin, p.size
                )));
            }
            if p.image.bands() != band_set.as_slice() {
                return Err(PatchError::SetMismatch(format!(
                    "patch {:?} bands {:?} differ from set bands {:?}",
                    p.origin,
                    p.image.bands(),
                    band_set
                )));
            }
        }
        Ok(Self {
            patches,
            size,
            band_set,
            split,
        })
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn band_set(&self) -> &[BandId] {
        &self.band_set
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Restricts every patch to `bands`.
    pub fn select_bands(&self, bands: &[BandId]) -> Result<Self, PatchError> {
        let bands = raster::canonical_bands(bands)?;
        let patches = self
            .patches
            .iter()
            .map(|p| {
                Ok(Patch {
                    image: p.image.select_bands(&bands)?,
                    ..p.clone()
                })
            })
            .collect::<Result<Vec<_>, RasterError>>()?;
        Self::new(patches, self.size, bands, self.split)
    }
}

/// Share of pixels labeled OTHER.
pub fn other_fraction(mask: &LabelMask) -> f64 {
    let total = mask.height() * mask.width();
    if total == 0 {
        return 0.0;
    }
    mask.class_counts()[IrrigationClass::Other.code() as usize] as f64 / total as f64
}

/// Keep rule shared by tile and patch filters: only strictly exceeding the
/// threshold excludes.
fn keeps(mask: &LabelMask, threshold: f64) -> bool {
    let total = (mask.height() * mask.width()) as f64;
    let other = mask.class_counts()[IrrigationClass::Other.code() as usize] as f64;
    other <= threshold * total * (1.0 + 1e-12)
}

/// Non-overlapping grid tiling with stride equal to `size`.
pub fn tile(
    img: &MultispectralImage,
    mask: &LabelMask,
    size: usize,
    tile_id: usize,
) -> Result<Vec<Patch>, PatchError> {
    tile_with_stride(img, mask, size, size, tile_id)
}

/// Grid tiling with an explicit stride; windows must fit inside the tile.
pub fn tile_with_stride(
    img: &MultispectralImage,
    mask: &LabelMask,
    size: usize,
    stride: usize,
    tile_id: usize,
) -> Result<Vec<Patch>, PatchError> {
    raster::check_coregistered(img, mask)?;
    if size == 0 || stride == 0 {
        return Err(PatchError::Invalid("patch size and stride must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    if h % size != 0 || w % size != 0 || (h - size) % stride != 0 || (w - size) % stride != 0 {
        return Err(PatchError::IndivisibleDimensions { h, w, size });
    }
    let mut out = Vec::new();
    for row_off in (0..=h - size).step_by(stride) {
        for col_off in (0..=w - size).step_by(stride) {
            out.push(Patch {
                image: img.window(row_off, col_off, size, size),
                mask: mask.window(row_off, col_off, size, size),
                origin: PatchOrigin {
                    tile_id,
                    row_off,
                    col_off,
                },
                size,
            });
        }
    }
    Ok(out)
}

/// Keeps patches whose OTHER share is at most `other_threshold`.
pub fn filter_patches(patches: Vec<Patch>, other_threshold: f64) -> Vec<Patch> {
    patches
        .into_iter()
        .filter(|p| keeps(&p.mask, other_threshold))
        .collect()
}

/// A full labeled tile.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTile {
    pub tile_id: usize,
    pub image: MultispectralImage,
    pub mask: LabelMask,
}

/// Tile-level counterpart of [`filter_patches`], default threshold
/// [`TILE_OTHER_THRESHOLD`].
pub fn filter_tiles(tiles: Vec<LabeledTile>, other_threshold: f64) -> Vec<LabeledTile> {
    tiles
        .into_iter()
        .filter(|t| keeps(&t.mask, other_threshold))
        .collect()
}

/// Seeded tile-level partition; every patch of a tile follows its tile.
pub fn split_train_val(
    tile_ids: &[usize],
    val_ratio: f64,
    seed: u64,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>), PatchError> {
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(PatchError::Invalid(format!("val_ratio {val_ratio} not in (0,1)")));
    }
    let mut ids: Vec<usize> = tile_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    let n_val = (n as f64 * val_ratio).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(PatchError::TooFewTiles { n, ratio: val_ratio });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let val: BTreeSet<usize> = ids[..n_val].iter().copied().collect();
    let train: BTreeSet<usize> = ids[n_val..].iter().copied().collect();
    Ok((train, val))
}

/// Reassembles a tile from its patches (inverse of [`tile`]).
pub fn stitch(patches: &[Patch], h: usize, w: usize) -> Result<(Array3<f32>, Array2<u8>), PatchError> {
    let first = patches
        .first()
        .ok_or_else(|| PatchError::Invalid("nothing to stitch".into()))?;
    let c = first.image.n_bands();
    let mut img = Array3::<f32>::zeros((h, w, c));
    let mut mask = Array2::<u8>::zeros((h, w));
    for p in patches {
        let s = p.size;
        let (r0, c0) = (p.origin.row_off, p.origin.col_off);
        if r0 + s > h || c0 + s > w {
            return Err(PatchError::Invalid(format!("patch {:?} outside {h}x{w}", p.origin)));
        }
        img.slice_mut(ndarray::s![r0..r0 + s, c0..c0 + s, ..])
            .assign(p.image.data());
        mask.slice_mut(ndarray::s![r0..r0 + s, c0..c0 + s])
            .assign(p.mask.data());
    }
    Ok((img, mask))
}

/// Sorts patches into the canonical (tile_id, row_off, col_off) order.
pub fn sort_patches(patches: &mut [Patch]) {
    patches.sort_by_key(|p| p.origin);
}

/// Thresholds and split parameters for building patch sets from tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub tile_other_threshold: f64,
    /// Applied to patches smaller than their tile.
    pub patch_other_threshold: f64,
    pub val_ratio: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            tile_other_threshold: TILE_OTHER_THRESHOLD,
            patch_other_threshold: PATCH_OTHER_THRESHOLD,
            val_ratio: 0.2,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        for (name, v) in [
            ("tile_other_threshold", self.tile_other_threshold),
            ("patch_other_threshold", self.patch_other_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PatchError::Invalid(format!("{name} {v} not in [0,1]")));
            }
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return Err(PatchError::Invalid(format!("val_ratio {} not in (0,1)", self.val_ratio)));
        }
        Ok(())
    }
}

/// Tile-level filter and split, then per-size tiling and patch filtering.
/// Both splits are filtered. Returns the tile ids of each split alongside.
pub fn build_patch_sets(
    tiles: Vec<LabeledTile>,
    sizes: &[usize],
    cfg: &PatchConfig,
) -> Result<(BTreeMap<(usize, Split), PatchSet>, BTreeMap<Split, BTreeSet<usize>>), PatchError> {
    cfg.validate()?;
    let n_in = tiles.len();
    let tiles = filter_tiles(tiles, cfg.tile_other_threshold);
    log::info!("kept {} of {n_in} tiles", tiles.len());
    let bands = match tiles.first() {
        Some(t) => t.image.bands().to_vec(),
        None => return Err(PatchError::TooFewTiles { n: 0, ratio: cfg.val_ratio }),
    };
    let ids: Vec<usize> = tiles.iter().map(|t| t.tile_id).collect();
    let (train_ids, val_ids) = split_train_val(&ids, cfg.val_ratio, cfg.seed)?;
    let mut sets = BTreeMap::new();
    for &size in sizes {
        let mut per_split: BTreeMap<Split, Vec<Patch>> = BTreeMap::new();
        for t in &tiles {
            let split = if val_ids.contains(&t.tile_id) { Split::Val } else { Split::Train };
            let mut patches = tile(&t.image, &t.mask, size, t.tile_id)?;
            if size < t.image.height() || size < t.image.width() {
                patches = filter_patches(patches, cfg.patch_other_threshold);
            }
            per_split.entry(split).or_default().extend(patches);
        }
        for split in [Split::Train, Split::Val] {
            let mut patches = per_split.remove(&split).unwrap_or_default();
            sort_patches(&mut patches);
            sets.insert((size, split), PatchSet::new(patches, size, bands.clone(), split)?);
        }
    }
    let splits = BTreeMap::from([(Split::Train, train_ids), (Split::Val, val_ids)]);
    Ok((sets, splits))
}

/// One JSON line of a patch manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub origin: PatchOrigin,
    pub size: usize,
    pub split: Split,
    pub other_fraction: f64,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), PatchError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e).map_err(|e| PatchError::Manifest(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, PatchError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PatchError::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Writes each patch as a PSEG archive (image + mask) under `dir` and
/// returns the manifest entries, in input order.
pub fn write_patches(dir: &Path, patches: &[Patch], split: Split) -> Result<Vec<ManifestEntry>, PatchError> {
    fs::create_dir_all(dir)?;
    patches
        .iter()
        .map(|p| {
            let name = format!(
                "t{:05}_r{:04}_c{:04}_s{}.pseg",
                p.origin.tile_id, p.origin.row_off, p.origin.col_off, p.size
            );
            raster::save_labeled(&p.image, &p.mask, dir.join(&name), RasterFormat::Archive)?;
            Ok(ManifestEntry {
                path: PathBuf::from(&name),
                origin: p.origin,
                size: p.size,
                split,
                other_fraction: other_fraction(&p.mask),
            })
        })
        .collect()
}

/// Loads the patches of `split` listed in a manifest, restricted to `bands`.
pub fn load_patch_set(manifest: &Path, split: Split, bands: &[BandId]) -> Result<PatchSet, PatchError> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let entries = read_manifest(manifest)?;
    let bands = raster::canonical_bands(bands)?;
    let mut size = None;
    let mut patches = Vec::new();
    for e in entries.into_iter().filter(|e| e.split == split) {
        if *size.get_or_insert(e.size) != e.size {
            return Err(PatchError::SetMismatch("manifest mixes patch sizes".into()));
        }
        let (image, mask) = raster::load_labeled(base.join(&e.path), &bands)?;
        patches.push(Patch {
            image,
            mask,
            origin: e.origin,
            size: e.size,
        });
    }
    let size = size.ok_or_else(|| PatchError::Manifest(format!("no {split:?} patches in {}", manifest.display())))?;
    sort_patches(&mut patches);
    PatchSet::new(patches, size, bands, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ValueDomain;

    fn pair(h: usize, w: usize, mask_fn: impl Fn(usize, usize) -> u8) -> (MultispectralImage, LabelMask) {
        let img = MultispectralImage::new(
            Array3::from_shape_fn((h, w, 2), |(r, c, b)| (r * w + c) as f32 + b as f32 * 0.5),
            vec![BandId::Red, BandId::Nir],
            ValueDomain::RawReflectance,
        )
        .unwrap();
        let mask = LabelMask::new(Array2::from_shape_fn((h, w), |(r, c)| mask_fn(r, c))).unwrap();
        (img, mask)
    }

    fn mask_with_other(n_side: usize, n_other: usize) -> LabelMask {
        LabelMask::new(Array2::from_shape_fn((n_side, n_side), |(r, c)| {
            if r * n_side + c < n_other {
                0
            } else {
                1
            }
        }))
        .unwrap()
    }

    #[test]
    fn other_fraction_cases() {
        assert_eq!(other_fraction(&LabelMask::filled(4, 4, IrrigationClass::Other)), 1.0);
        assert_eq!(other_fraction(&LabelMask::filled(4, 4, IrrigationClass::Flood)), 0.0);
        assert_eq!(other_fraction(&mask_with_other(8, 32)), 0.5);
    }

    #[test]
    fn tiling_counts() {
        let (img, mask) = pair(256, 256, |_, _| 0);
        assert_eq!(tile(&img, &mask, 64, 0).unwrap().len(), 16);
        assert_eq!(tile(&img, &mask, 128, 0).unwrap().len(), 4);
        let one = tile(&img, &mask, 256, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].image, img);
        assert_eq!(one[0].mask, mask);
        assert!(matches!(
            tile(&img, &mask, 100, 0),
            Err(PatchError::IndivisibleDimensions { .. })
        ));
    }

    #[test]
    fn tiling_is_a_partition() {
        let (img, mask) = pair(128, 64, |r, c| ((r / 7 + c / 5) % 3) as u8);
        let patches = tile(&img, &mask, 32, 3).unwrap();
        assert_eq!(patches.len(), 8);
        for p in &patches {
            assert_eq!(p.origin.row_off % 32, 0);
            assert_eq!(p.origin.col_off % 32, 0);
            assert_eq!(p.origin.tile_id, 3);
        }
        let (si, sm) = stitch(&patches, 128, 64).unwrap();
        assert_eq!(&si, img.data());
        assert_eq!(&sm, mask.data());
    }

    #[test]
    fn strided_tiling() {
        let (img, mask) = pair(64, 64, |_, _| 0);
        assert_eq!(tile_with_stride(&img, &mask, 32, 16, 0).unwrap().len(), 9);
    }

    fn patch_from(mask: LabelMask) -> Patch {
        let n = mask.height();
        let image = MultispectralImage::new(
            Array3::zeros((n, n, 1)),
            vec![BandId::Red],
            ValueDomain::UnitNormalized,
        )
        .unwrap();
        Patch {
            image,
            mask,
            origin: PatchOrigin {
                tile_id: 0,
                row_off: 0,
                col_off: 0,
            },
            size: n,
        }
    }

    #[test]
    fn patch_threshold_is_strict_exceedance() {
        let exact = patch_from(mask_with_other(10, 80));
        let over = patch_from(mask_with_other(10, 81));
        let kept = filter_patches(vec![exact.clone(), over], PATCH_OTHER_THRESHOLD);
        assert_eq!(kept, vec![exact]);
        assert!(filter_patches(vec![], 0.8).is_empty());
    }

    #[test]
    fn tile_threshold() {
        let t = |m: LabelMask| LabeledTile {
            tile_id: 0,
            image: MultispectralImage::new(Array3::zeros((20, 20, 1)), vec![BandId::Red], ValueDomain::UnitNormalized).unwrap(),
            mask: m,
        };
        let all_other = t(LabelMask::filled(20, 20, IrrigationClass::Other));
        let half = t(mask_with_other(20, 200));
        let ninety_five = t(mask_with_other(20, 380));
        let ninety = t(mask_with_other(20, 360));
        let kept = filter_tiles(vec![all_other, half.clone(), ninety_five, ninety.clone()], TILE_OTHER_THRESHOLD);
        assert_eq!(kept, vec![half, ninety]);
    }

    #[test]
    fn split_arithmetic_and_determinism() {
        let ids: Vec<usize> = (0..10).collect();
        let (train, val) = split_train_val(&ids, 0.2, 42).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert!(train.is_disjoint(&val));
        assert_eq!(split_train_val(&ids, 0.2, 42).unwrap(), (train, val));

        let big: Vec<usize> = (0..925).collect();
        let (t, v) = split_train_val(&big, 127.0 / 925.0, 7).unwrap();
        assert_eq!((t.len(), v.len()), (798, 127));

        assert!(matches!(
            split_train_val(&[1, 2], 0.1, 0),
            Err(PatchError::TooFewTiles { .. })
        ));
        assert!(split_train_val(&ids, 1.0, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = pair(64, 64, |r, _| (r % 3) as u8);
        let img = img.with_data(img.data().mapv(|v| v / 5000.0), ValueDomain::UnitNormalized).unwrap();
        let patches = tile(&img, &mask, 32, 5).unwrap();
        let entries = write_patches(dir.path(), &patches, Split::Val).unwrap();
        let mpath = dir.path().join("manifest.jsonl");
        write_manifest(&mpath, &entries).unwrap();
        assert_eq!(read_manifest(&mpath).unwrap(), entries);
        let set = load_patch_set(&mpath, Split::Val, &[BandId::Nir]).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.band_set(), &[BandId::Nir]);
        assert_eq!(set.patches()[3].origin.row_off, 32);
        assert!(load_patch_set(&mpath, Split::Train, &[BandId::Nir]).is_err());
    }
}
