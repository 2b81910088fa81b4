//! PSEG portable archive.
//!
//! Little-endian layout, version 1:
//!
//! | field          | type            | notes                                  |
//! |----------------|-----------------|----------------------------------------|
//! | magic          | `[u8; 4]`       | `b"PSEG"`                              |
//! | version        | `u16`           | `1`                                    |
//! | height         | `u32`           |                                        |
//! | width          | `u32`           |                                        |
//! | channels       | `u16`           | C                                      |
//! | band codes     | `[u8; C]`       | 0=BLUE .. 6=THERMAL, file order        |
//! | value domain   | `u8`            | 0=RAW_REFLECTANCE, 1=UNIT_NORMALIZED   |
//! | resolution     | `f64`           | meters per pixel                       |
//! | payload        | `[f32; H*W*C]`  | row-major, band-interleaved            |
//! | has mask       | `u8`            | 0 or 1                                 |
//! | mask payload   | `[u8; H*W]`     | present iff has mask == 1, row-major   |
//!
//! Nothing may follow the last field.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{BandId, LabelMask, MultispectralImage, RasterError, ValueDomain};

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const VERSION: u16 = 1;

pub fn encode(img: &MultispectralImage, mask: Option<&LabelMask>) -> Vec<u8> {
    let (h, w, c) = img.data().dim();
    let mut buf = Vec::with_capacity(32 + c + h * w * c * 4 + h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u16).to_le_bytes());
    buf.extend(img.bands().iter().map(|b| b.code()));
    buf.push(img.value_domain().code());
    buf.extend_from_slice(&img.resolution_m().to_le_bytes());
    for v in img.data().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    match mask {
        Some(m) => {
            buf.push(1);
            buf.extend(m.data().iter().copied());
        }
        None => buf.push(0),
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RasterError> {
        if self.bytes.len() - self.pos < n {
            return Err(RasterError::CorruptFile(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, RasterError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, RasterError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, RasterError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, RasterError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<(MultispectralImage, Option<LabelMask>), RasterError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(RasterError::CorruptFile("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(RasterError::CorruptFile(format!("unsupported version {version}")));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u16("channels")? as usize;
    let bands = r
        .take(c, "band codes")?
        .iter()
        .map(|&code| {
            BandId::from_code(code)
                .ok_or_else(|| RasterError::CorruptFile(format!("unknown band code {code}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let domain_code = r.u8("value domain")?;
    let domain = ValueDomain::from_code(domain_code)
        .ok_or_else(|| RasterError::CorruptFile(format!("unknown value domain {domain_code}")))?;
    let resolution = r.f64("resolution")?;

    let n = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .ok_or_else(|| RasterError::CorruptFile("dimensions overflow".into()))?;
    let payload_len = n
        .checked_mul(4)
        .ok_or_else(|| RasterError::CorruptFile("dimensions overflow".into()))?;
    if r.remaining() < payload_len {
        return Err(RasterError::DimensionMismatch(format!(
            "header declares {h}x{w}x{c} ({payload_len} payload bytes) but only {} remain",
            r.remaining()
        )));
    }
    let payload = r.take(payload_len, "payload")?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec((h, w, c), values)
        .map_err(|e| RasterError::CorruptFile(e.to_string()))?;

    let mask = match r.u8("mask flag")? {
        0 => None,
        1 => {
            if r.remaining() < h * w {
                return Err(RasterError::DimensionMismatch(format!(
                    "mask payload needs {} bytes, {} remain",
                    h * w,
                    r.remaining()
                )));
            }
            let m = r.take(h * w, "mask")?.to_vec();
            let arr = Array2::from_shape_vec((h, w), m)
                .map_err(|e| RasterError::CorruptFile(e.to_string()))?;
            Some(LabelMask::new(arr).map_err(|e| RasterError::CorruptFile(e.to_string()))?)
        }
        other => return Err(RasterError::CorruptFile(format!("bad mask flag {other}"))),
    };
    if r.remaining() != 0 {
        return Err(RasterError::DimensionMismatch(format!(
            "{} unexpected trailing bytes",
            r.remaining()
        )));
    }
    let img = MultispectralImage::with_resolution(data, bands, domain, resolution)
        .map_err(|e| RasterError::CorruptFile(e.to_string()))?;
    Ok((img, mask))
}

pub fn write(path: &Path, img: &MultispectralImage, mask: Option<&LabelMask>) -> Result<(), RasterError> {
    if let Some(m) = mask {
        super::check_coregistered(img, m)?;
    }
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&encode(img, mask))?;
    out.flush()?;
    Ok(())
}

/// Reads an archive as stored (file band order).
pub fn read(path: &Path) -> Result<(MultispectralImage, Option<LabelMask>), RasterError> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        RasterError::CorruptFile(msg) => RasterError::CorruptFile(format!("{}: {msg}", path.display())),
        other => other,
    })
}
