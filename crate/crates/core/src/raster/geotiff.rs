//! Float32 multi-sample TIFF reader/writer.
//!
//! Band identities, value domain and resolution travel as a JSON document
//! in the `ImageDescription` tag. Files without that document (for example
//! exports from other tools) are assumed to hold the first C canonical
//! bands in canonical order. Label masks are separate single-band `u8`
//! files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::colortype::{ColorType, Gray8};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};

use super::{BandId, LabelMask, MultispectralImage, RasterError, ValueDomain, DEFAULT_RESOLUTION_M};

#[derive(Serialize, Deserialize)]
struct Description {
    bands: Vec<BandId>,
    value_domain: ValueDomain,
    resolution_m: f64,
}

pub fn is_tiff_magic(magic: &[u8; 4]) -> bool {
    magic == b"II*\0" || magic == b"MM\0*"
}

/// `tile.tif` → `tile_mask.tif`.
pub fn mask_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}_mask.tif"))
}

macro_rules! float_bands {
    ($($name:ident = $n:expr),*) => {$(
        struct $name;
        impl ColorType for $name {
            type Inner = f32;
            const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
            const BITS_PER_SAMPLE: &'static [u16] = &[32; $n];
            const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP; $n];
            fn horizontal_predict(row: &[f32], result: &mut Vec<f32>) {
                result.extend_from_slice(row);
            }
        }
    )*};
}

float_bands!(F1 = 1, F2 = 2, F3 = 3, F4 = 4, F5 = 5, F6 = 6, F7 = 7);

fn tiff_err(path: &Path, e: tiff::TiffError) -> RasterError {
    match e {
        tiff::TiffError::IoError(io) => RasterError::Io(io),
        other => RasterError::CorruptFile(format!("{}: {other}", path.display())),
    }
}

fn write_samples<C: ColorType<Inner = f32>>(
    enc: &mut TiffEncoder<BufWriter<File>>,
    w: u32,
    h: u32,
    desc: &str,
    samples: &[f32],
) -> Result<(), tiff::TiffError> {
    let mut image = enc.new_image::<C>(w, h)?;
    image.encoder().write_tag(Tag::ImageDescription, desc)?;
    let extra = C::BITS_PER_SAMPLE.len() - 1;
    if extra > 0 {
        // Unspecified extra samples.
        let codes = vec![0u16; extra];
        image.encoder().write_tag(Tag::ExtraSamples, &codes[..])?;
    }
    image.write_data(samples)
}

pub fn write_image(path: &Path, img: &MultispectralImage) -> Result<(), RasterError> {
    let desc = serde_json::to_string(&Description {
        bands: img.bands().to_vec(),
        value_domain: img.value_domain(),
        resolution_m: img.resolution_m(),
    })
    .expect("description serializes");
    let (h, w, c) = img.data().dim();
    let samples: Vec<f32> = img.data().iter().copied().collect();
    let file = File::create(path)?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = (w as u32, h as u32);
    let res = match c {
        1 => write_samples::<F1>(&mut enc, w, h, &desc, &samples),
        2 => write_samples::<F2>(&mut enc, w, h, &desc, &samples),
        3 => write_samples::<F3>(&mut enc, w, h, &desc, &samples),
        4 => write_samples::<F4>(&mut enc, w, h, &desc, &samples),
        5 => write_samples::<F5>(&mut enc, w, h, &desc, &samples),
        6 => write_samples::<F6>(&mut enc, w, h, &desc, &samples),
        7 => write_samples::<F7>(&mut enc, w, h, &desc, &samples),
        _ => unreachable!("band list has no duplicates so C <= 7"),
    };
    res.map_err(|e| tiff_err(path, e))
}

pub fn read_image(path: &Path) -> Result<MultispectralImage, RasterError> {
    let file = File::open(path)?;
    let mut dec = Decoder::new(std::io::BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let (w, h) = (w as usize, h as usize);
    let desc: Option<Description> = dec
        .get_tag_ascii_string(Tag::ImageDescription)
        .ok()
        .and_then(|s| serde_json::from_str(s.trim_end_matches('\0')).ok());
    let values: Vec<f32> = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => {
            return Err(RasterError::CorruptFile(format!(
                "{}: unsupported sample type",
                path.display()
            )))
        }
    };
    if h * w == 0 || values.len() % (h * w) != 0 {
        return Err(RasterError::DimensionMismatch(format!(
            "{}: {} samples for {h}x{w} pixels",
            path.display(),
            values.len()
        )));
    }
    let c = values.len() / (h * w);
    let (bands, domain, res) = match desc {
        Some(d) => (d.bands, d.value_domain, d.resolution_m),
        None => {
            if c > BandId::CANONICAL.len() {
                return Err(RasterError::CorruptFile(format!(
                    "{}: {c} samples per pixel without band metadata",
                    path.display()
                )));
            }
            (
                BandId::CANONICAL[..c].to_vec(),
                ValueDomain::RawReflectance,
                DEFAULT_RESOLUTION_M,
            )
        }
    };
    if bands.len() != c {
        return Err(RasterError::DimensionMismatch(format!(
            "{}: metadata lists {} bands, file has {c} samples per pixel",
            path.display(),
            bands.len()
        )));
    }
    let data = Array3::from_shape_vec((h, w, c), values)
        .map_err(|e| RasterError::CorruptFile(e.to_string()))?;
    MultispectralImage::with_resolution(data, bands, domain, res)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<(), RasterError> {
    let file = File::create(path)?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let bytes: Vec<u8> = mask.data().iter().copied().collect();
    enc.write_image::<Gray8>(mask.width() as u32, mask.height() as u32, &bytes)
        .map_err(|e| tiff_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<LabelMask, RasterError> {
    let file = File::open(path)?;
    let mut dec = Decoder::new(std::io::BufReader::new(file)).map_err(|e| tiff_err(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
    let bytes = match dec.read_image().map_err(|e| tiff_err(path, e))? {
        DecodingResult::U8(v) => v,
        _ => {
            return Err(RasterError::CorruptFile(format!(
                "{}: mask must be single-band u8",
                path.display()
            )))
        }
    };
    let arr = Array2::from_shape_vec((h as usize, w as usize), bytes)
        .map_err(|e| RasterError::DimensionMismatch(format!("{}: {e}", path.display())))?;
    LabelMask::new(arr)
}
