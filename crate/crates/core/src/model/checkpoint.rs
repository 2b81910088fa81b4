//! Checkpoint container and cross-stage weight operations.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PSCK" | u16 version | u32 meta_len | meta JSON
//! u32 n_tensors | per tensor, sorted by name:
//!     u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | f32 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelError, ModelSpec};
use crate::raster::{canonical_bands, BandId};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const FIRST_CONV: &str = "stem.conv.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type WeightMap = BTreeMap<String, NamedTensor>;

/// FNV-1a over names, shapes and the bit patterns of every value.
pub fn weights_digest<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a NamedTensor)>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in tensors {
        eat(name.as_bytes());
        for &d in &t.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Initialization of first-layer kernels for newly added bands.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtendInit {
    /// Elementwise mean of the existing bands' kernels.
    #[default]
    Mean,
    /// Copy of the existing band closest in center wavelength.
    Nearest,
    Zeros,
}

impl FromStr for ExtendInit {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "nearest" => Ok(Self::Nearest),
            "zeros" => Ok(Self::Zeros),
            other => Err(ModelError::InvalidSpec(format!("unknown extend init '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub weights: WeightMap,
    pub spec: ModelSpec,
    pub bands: Vec<BandId>,
    /// `(patch_size, epochs)` per completed stage.
    pub stage_history: Vec<(usize, usize)>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    bands: Vec<BandId>,
    stage_history: Vec<(usize, usize)>,
    seed: u64,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model, bands: &[BandId], stage_history: Vec<(usize, usize)>, seed: u64) -> Result<Self, ModelError> {
        let ckpt = Self {
            weights: model.state_dict(),
            spec: model.spec().clone(),
            bands: bands.to_vec(),
            stage_history,
            seed,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.bands.len() != self.spec.in_channels {
            return Err(ModelError::SpecMismatch(format!(
                "{} bands for {} input channels",
                self.bands.len(),
                self.spec.in_channels
            )));
        }
        for (name, t) in &self.weights {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(ModelError::Corrupt(format!("tensor '{name}' payload does not match its shape")));
            }
        }
        Ok(())
    }

    /// Rebuilds a model carrying these weights.
    pub fn to_model(&self) -> Result<Model, ModelError> {
        let mut model = build_model(&self.spec, self.seed)?;
        transfer_weights(&mut model, self)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>, ModelError> {
        let meta = serde_json::to_vec(&Meta {
            spec: self.spec.clone(),
            bands: self.bands.clone(),
            stage_history: self.stage_history.clone(),
            seed: self.seed,
        })
        .map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, t) in &self.weights {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ModelError::Corrupt(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let n = r.u32()? as usize;
        let mut weights = BTreeMap::new();
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| ModelError::Corrupt(e.to_string()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(ModelError::Corrupt(format!("unsupported dtype {dtype}")));
            }
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            weights.insert(name, NamedTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        let ckpt = Self {
            weights,
            spec: meta.spec,
            bands: meta.bands,
            stage_history: meta.stage_history,
            seed: meta.seed,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads checkpoint weights into a model of the same architecture.
pub fn transfer_weights(model: &mut Model, ckpt: &ModelCheckpoint) -> Result<(), ModelError> {
    let spec = model.spec();
    if spec.in_channels != ckpt.spec.in_channels {
        return Err(ModelError::SpecMismatch(format!(
            "checkpoint has {} input channels, model {}",
            ckpt.spec.in_channels, spec.in_channels
        )));
    }
    if !spec.same_architecture(&ckpt.spec) {
        return Err(ModelError::SpecMismatch("backbone, classes or widths differ".into()));
    }
    model.load_state_dict(&ckpt.weights)
}

/// Widens the first convolution to accept `new_bands`. Kernels of existing
/// bands are copied; kernels of added bands follow `init`. Every other
/// tensor is copied unchanged.
pub fn extend_input_channels(ckpt: &ModelCheckpoint, new_bands: &[BandId], init: ExtendInit) -> Result<ModelCheckpoint, ModelError> {
    let new_bands = canonical_bands(new_bands)?;
    if let Some(&b) = ckpt.bands.iter().find(|b| !new_bands.contains(b)) {
        return Err(ModelError::BandSubsetViolation(b));
    }
    let first = ckpt
        .weights
        .get(FIRST_CONV)
        .ok_or_else(|| ModelError::MissingWeight(FIRST_CONV.into()))?;
    let c_old = ckpt.bands.len();
    if first.shape.len() != 4 || first.shape[1] != c_old {
        return Err(ModelError::ShapeMismatch {
            name: FIRST_CONV.into(),
            expected: vec![first.shape.first().copied().unwrap_or(0), c_old, 0, 0],
            got: first.shape.clone(),
        });
    }
    let (out_ch, kk) = (first.shape[0], first.shape[2] * first.shape[3]);
    let c_new = new_bands.len();
    let kernel = |o: usize, c: usize| &first.data[(o * c_old + c) * kk..(o * c_old + c + 1) * kk];

    let mut data = vec![0.0f32; out_ch * c_new * kk];
    for o in 0..out_ch {
        for (j, band) in new_bands.iter().enumerate() {
            let dst = &mut data[(o * c_new + j) * kk..(o * c_new + j + 1) * kk];
            if let Some(i) = ckpt.bands.iter().position(|b| b == band) {
                dst.copy_from_slice(kernel(o, i));
                continue;
            }
            match init {
                ExtendInit::Zeros => {}
                ExtendInit::Mean => {
                    for (t, d) in dst.iter_mut().enumerate() {
                        let sum: f64 = (0..c_old).map(|i| kernel(o, i)[t] as f64).sum();
                        *d = (sum / c_old as f64) as f32;
                    }
                }
                ExtendInit::Nearest => {
                    let target = band.center_wavelength_um();
                    let nearest = (0..c_old)
                        .min_by(|&a, &b| {
                            let da = (ckpt.bands[a].center_wavelength_um() - target).abs();
                            let db = (ckpt.bands[b].center_wavelength_um() - target).abs();
                            da.total_cmp(&db)
                        })
                        .expect("checkpoint has at least one band");
                    dst.copy_from_slice(kernel(o, nearest));
                }
            }
        }
    }

    let mut weights = ckpt.weights.clone();
    weights.insert(
        FIRST_CONV.into(),
        NamedTensor {
            shape: vec![out_ch, c_new, first.shape[2], first.shape[3]],
            data,
        },
    );
    let out = ModelCheckpoint {
        weights,
        spec: ModelSpec {
            in_channels: c_new,
            ..ckpt.spec.clone()
        },
        bands: new_bands,
        stage_history: ckpt.stage_history.clone(),
        seed: ckpt.seed,
    };
    out.validate()?;
    Ok(out)
}
