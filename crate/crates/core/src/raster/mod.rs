//! Multispectral rasters, label masks and their on-disk formats.
//!
//! Two containers are supported behind [`load_raster`] / [`save_raster`]:
//! the portable PSEG archive (see [`archive`]) and plain multi-sample
//! float32 TIFF/GeoTIFF (see [`geotiff`]). Loading always returns bands in
//! canonical order, whatever order the file stores them in.

pub mod archive;
pub mod geotiff;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default ground sampling distance in meters (Landsat surface reflectance).
pub const DEFAULT_RESOLUTION_M: f64 = 30.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster lacks requested band {0}")]
    MissingBand(BandId),
    #[error("corrupt raster file: {0}")]
    CorruptFile(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Spectral band identity, declared in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BandId {
    Blue,
    Green,
    Red,
    Swir1,
    Swir2,
    Nir,
    Thermal,
}

impl BandId {
    pub const CANONICAL: [BandId; 7] = [
        BandId::Blue,
        BandId::Green,
        BandId::Red,
        BandId::Swir1,
        BandId::Swir2,
        BandId::Nir,
        BandId::Thermal,
    ];

    /// Stable one-byte code used by the archive format (canonical index).
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<BandId> {
        Self::CANONICAL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BandId::Blue => "BLUE",
            BandId::Green => "GREEN",
            BandId::Red => "RED",
            BandId::Swir1 => "SWIR1",
            BandId::Swir2 => "SWIR2",
            BandId::Nir => "NIR",
            BandId::Thermal => "THERMAL",
        }
    }

    /// Short token used in band-set shorthands such as `RGBNS1S2Th`.
    pub fn token(self) -> &'static str {
        match self {
            BandId::Blue => "B",
            BandId::Green => "G",
            BandId::Red => "R",
            BandId::Swir1 => "S1",
            BandId::Swir2 => "S2",
            BandId::Nir => "N",
            BandId::Thermal => "Th",
        }
    }

    /// Approximate band center in micrometres (Landsat 8 OLI/TIRS).
    pub fn center_wavelength_um(self) -> f64 {
        match self {
            BandId::Blue => 0.482,
            BandId::Green => 0.562,
            BandId::Red => 0.655,
            BandId::Nir => 0.865,
            BandId::Swir1 => 1.609,
            BandId::Swir2 => 2.201,
            BandId::Thermal => 10.895,
        }
    }
}

impl fmt::Display for BandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BandId {
    type Err = RasterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        BandId::CANONICAL
            .iter()
            .copied()
            .find(|b| b.name() == upper || b.token().to_ascii_uppercase() == upper)
            .ok_or_else(|| RasterError::Invalid(format!("unknown band '{s}'")))
    }
}

/// Sorts into canonical order and rejects duplicates.
pub fn canonical_bands(bands: &[BandId]) -> Result<Vec<BandId>, RasterError> {
    let mut out = bands.to_vec();
    out.sort();
    if out.windows(2).any(|w| w[0] == w[1]) {
        return Err(RasterError::Invalid(format!(
            "duplicate band in {:?}",
            bands
        )));
    }
    Ok(out)
}

/// Parses a band-set description.
///
/// Accepts either a comma separated list of band names (`RED,GREEN,NIR`) or
/// the compact shorthand used for channel ablations (`RGB`, `RGBN`,
/// `RGBNS1S2Th`, ...). The result is canonical.
pub fn parse_band_set(spec: &str) -> Result<Vec<BandId>, RasterError> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("all") {
        return Ok(BandId::CANONICAL.to_vec());
    }
    let bands = if spec.contains(',') {
        spec.split(',')
            .map(BandId::from_str)
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let mut bands = Vec::new();
        let chars: Vec<char> = spec.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let (band, step) = match (chars[i], chars.get(i + 1)) {
                ('S', Some('1')) => (BandId::Swir1, 2),
                ('S', Some('2')) => (BandId::Swir2, 2),
                ('T', Some('h')) => (BandId::Thermal, 2),
                ('R', _) => (BandId::Red, 1),
                ('G', _) => (BandId::Green, 1),
                ('B', _) => (BandId::Blue, 1),
                ('N', _) => (BandId::Nir, 1),
                _ => {
                    return Err(RasterError::Invalid(format!(
                        "cannot parse band set '{spec}'"
                    )))
                }
            };
            bands.push(band);
            i += step;
        }
        bands
    };
    if bands.is_empty() {
        return Err(RasterError::Invalid("empty band set".into()));
    }
    canonical_bands(&bands)
}

/// Compact label for a band set, e.g. `RGBN`.
pub fn band_set_label(bands: &[BandId]) -> String {
    // Ablation tables list R, G, B first, then the infrared bands.
    let order = [
        BandId::Red,
        BandId::Green,
        BandId::Blue,
        BandId::Nir,
        BandId::Swir1,
        BandId::Swir2,
        BandId::Thermal,
    ];
    order
        .iter()
        .filter(|b| bands.contains(b))
        .map(|b| b.token())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValueDomain {
    RawReflectance,
    UnitNormalized,
}

impl ValueDomain {
    pub fn code(self) -> u8 {
        match self {
            ValueDomain::RawReflectance => 0,
            ValueDomain::UnitNormalized => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ValueDomain::RawReflectance),
            1 => Some(ValueDomain::UnitNormalized),
            _ => None,
        }
    }
}

/// H×W×C raster with named bands.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralImage {
    data: Array3<f32>,
    bands: Vec<BandId>,
    resolution_m: f64,
    value_domain: ValueDomain,
}

impl MultispectralImage {
    pub fn new(
        data: Array3<f32>,
        bands: Vec<BandId>,
        value_domain: ValueDomain,
    ) -> Result<Self, RasterError> {
        Self::with_resolution(data, bands, value_domain, DEFAULT_RESOLUTION_M)
    }

    pub fn with_resolution(
        data: Array3<f32>,
        bands: Vec<BandId>,
        value_domain: ValueDomain,
        resolution_m: f64,
    ) -> Result<Self, RasterError> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(RasterError::Invalid("empty raster".into()));
        }
        if c != bands.len() {
            return Err(RasterError::DimensionMismatch(format!(
                "{} channels but {} band ids",
                c,
                bands.len()
            )));
        }
        let mut sorted = bands.clone();
        sorted.sort();
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return Err(RasterError::Invalid(format!("duplicate band in {:?}", bands)));
        }
        if value_domain == ValueDomain::UnitNormalized
            && data.iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(RasterError::Invalid(
                "unit-normalized raster has values outside [0,1]".into(),
            ));
        }
        if !(resolution_m > 0.0) {
            return Err(RasterError::Invalid("resolution must be positive".into()));
        }
        Ok(Self {
            data,
            bands,
            resolution_m,
            value_domain,
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandId] {
        &self.bands
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn resolution_m(&self) -> f64 {
        self.resolution_m
    }

    pub fn value_domain(&self) -> ValueDomain {
        self.value_domain
    }

    pub fn band_index(&self, band: BandId) -> Option<usize> {
        self.bands.iter().position(|&b| b == band)
    }

    /// Replaces the pixel data, keeping band metadata; re-validates.
    pub fn with_data(&self, data: Array3<f32>, value_domain: ValueDomain) -> Result<Self, RasterError> {
        Self::with_resolution(data, self.bands.clone(), value_domain, self.resolution_m)
    }

    /// Reorders bands into canonical order (copying data).
    pub fn canonicalized(&self) -> Self {
        let mut order: Vec<BandId> = self.bands.clone();
        order.sort();
        self.select_bands(&order)
            .expect("canonical reorder of own bands cannot miss a band")
    }

    /// Extracts `subset` (any order, no duplicates) as a new image in
    /// canonical band order.
    pub fn select_bands(&self, subset: &[BandId]) -> Result<Self, RasterError> {
        let wanted = canonical_bands(subset)?;
        if wanted.is_empty() {
            return Err(RasterError::Invalid("empty band subset".into()));
        }
        let idx = wanted
            .iter()
            .map(|&b| self.band_index(b).ok_or(RasterError::MissingBand(b)))
            .collect::<Result<Vec<_>, _>>()?;
        let data = self.data.select(Axis(2), &idx);
        Ok(Self {
            data,
            bands: wanted,
            resolution_m: self.resolution_m,
            value_domain: self.value_domain,
        })
    }

    /// Copies a square-or-rectangular window.
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Self {
        let data = self
            .data
            .slice(ndarray::s![row..row + h, col..col + w, ..])
            .to_owned();
        Self {
            data,
            bands: self.bands.clone(),
            resolution_m: self.resolution_m,
            value_domain: self.value_domain,
        }
    }
}

/// Per-pixel irrigation class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum IrrigationClass {
    Other = 0,
    Flood = 1,
    Sprinkler = 2,
}

impl IrrigationClass {
    pub const ALL: [IrrigationClass; 3] = [
        IrrigationClass::Other,
        IrrigationClass::Flood,
        IrrigationClass::Sprinkler,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IrrigationClass::Other => "OTHER",
            IrrigationClass::Flood => "FLOOD",
            IrrigationClass::Sprinkler => "SPRINKLER",
        }
    }
}

pub const N_CLASSES: usize = 3;

/// H×W class codes in {0=OTHER, 1=FLOOD, 2=SPRINKLER}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    data: Array2<u8>,
}

impl LabelMask {
    pub fn new(data: Array2<u8>) -> Result<Self, RasterError> {
        if let Some(bad) = data.iter().find(|&&v| v as usize >= N_CLASSES) {
            return Err(RasterError::Invalid(format!("class code {bad} out of range")));
        }
        Ok(Self { data })
    }

    pub fn filled(h: usize, w: usize, class: IrrigationClass) -> Self {
        Self {
            data: Array2::from_elem((h, w), class.code()),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> IrrigationClass {
        IrrigationClass::from_code(self.data[[row, col]]).expect("validated mask")
    }

    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Self {
        Self {
            data: self
                .data
                .slice(ndarray::s![row..row + h, col..col + w])
                .to_owned(),
        }
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0usize; N_CLASSES];
        for &v in self.data.iter() {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// On-disk container for [`save_raster`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    Geotiff,
    Archive,
}

impl RasterFormat {
    pub fn from_path(path: &Path) -> RasterFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff") => {
                RasterFormat::Geotiff
            }
            _ => RasterFormat::Archive,
        }
    }
}

pub fn save_raster(
    img: &MultispectralImage,
    path: impl AsRef<Path>,
    format: RasterFormat,
) -> Result<(), RasterError> {
    match format {
        RasterFormat::Archive => archive::write(path.as_ref(), img, None),
        RasterFormat::Geotiff => geotiff::write_image(path.as_ref(), img),
    }
}

/// Loads a raster and returns exactly `expected_bands`, canonically ordered.
pub fn load_raster(
    path: impl AsRef<Path>,
    expected_bands: &[BandId],
) -> Result<MultispectralImage, RasterError> {
    let img = load_any(path.as_ref())?;
    img.select_bands(expected_bands)
}

/// Loads a raster keeping every band the file provides (canonical order).
pub fn load_all_bands(path: impl AsRef<Path>) -> Result<MultispectralImage, RasterError> {
    Ok(load_any(path.as_ref())?.canonicalized())
}

fn load_any(path: &Path) -> Result<MultispectralImage, RasterError> {
    let magic = sniff(path)?;
    if &magic == archive::MAGIC {
        Ok(archive::read(path)?.0)
    } else if geotiff::is_tiff_magic(&magic) {
        geotiff::read_image(path)
    } else {
        Err(RasterError::CorruptFile(format!(
            "{}: unrecognized file signature",
            path.display()
        )))
    }
}

fn sniff(path: &Path) -> Result<[u8; 4], RasterError> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| RasterError::CorruptFile(format!("{}: file too short", path.display())))?;
    Ok(magic)
}

/// Saves an image together with its label mask. Archives carry both
/// payloads; for GeoTIFF the mask goes to a sibling `*_mask.tif` file.
pub fn save_labeled(
    img: &MultispectralImage,
    mask: &LabelMask,
    path: impl AsRef<Path>,
    format: RasterFormat,
) -> Result<(), RasterError> {
    check_coregistered(img, mask)?;
    let path = path.as_ref();
    match format {
        RasterFormat::Archive => archive::write(path, img, Some(mask)),
        RasterFormat::Geotiff => {
            geotiff::write_image(path, img)?;
            geotiff::write_mask(&geotiff::mask_path_for(path), mask)
        }
    }
}

/// Loads an image/mask pair written by [`save_labeled`].
pub fn load_labeled(
    path: impl AsRef<Path>,
    expected_bands: &[BandId],
) -> Result<(MultispectralImage, LabelMask), RasterError> {
    let path = path.as_ref();
    let magic = sniff(path)?;
    let (img, mask) = if &magic == archive::MAGIC {
        let (img, mask) = archive::read(path)?;
        let mask = mask.ok_or_else(|| {
            RasterError::CorruptFile(format!("{}: archive has no mask payload", path.display()))
        })?;
        (img, mask)
    } else if geotiff::is_tiff_magic(&magic) {
        let img = geotiff::read_image(path)?;
        let mask = geotiff::read_mask(&geotiff::mask_path_for(path))?;
        (img, mask)
    } else {
        return Err(RasterError::CorruptFile(format!(
            "{}: unrecognized file signature",
            path.display()
        )));
    };
    check_coregistered(&img, &mask)?;
    Ok((img.select_bands(expected_bands)?, mask))
}

pub fn check_coregistered(img: &MultispectralImage, mask: &LabelMask) -> Result<(), RasterError> {
    if img.height() != mask.height() || img.width() != mask.width() {
        return Err(RasterError::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}
