//! Binary checkpoint format.
//!
//! ```text
//! magic       8 bytes  "IRLM0001"
//! version     u32
//! config      u32 byte length, UTF-8 key=value lines
//! n_params    u32
//! per param   u32 name length, name, u8 dtype, u32 rank, u64 extents…, raw values
//! optimizer   u8 present flag; if 1: u64 step, f64 beta1, beta2, eps, weight_decay,
//!             then per param: raw first moments, raw second moments
//! ```
//! All integers and values are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"IRLM0001";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<T: Scalar>(model: &Model<T>, optimizer: Option<&AdamState<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        p.tensor.data().iter().for_each(|v| v.write_le(&mut out));
    }
    match optimizer {
        None => out.push(0),
        Some(adam) => {
            out.push(1);
            out.extend_from_slice(&adam.step_count().to_le_bytes());
            let c = adam.config;
            for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let (first, second) = adam.moments();
            for p in 0..model.params.len() {
                let numel = model.params[p].tensor.numel();
                for moments in [first, second] {
                    match moments.get(p) {
                        Some(m) => m.iter().for_each(|v| v.write_le(&mut out)),
                        // optimizer not stepped yet
                        None => (0..numel).for_each(|_| T::zero().write_le(&mut out)),
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn values<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * dtype.size())?;
        Ok(raw
            .chunks(dtype.size())
            .map(|c| match dtype {
                DType::F32 => T::lit(f32::read_le(c) as f64),
                DType::F64 => T::lit(f64::read_le(c)),
            })
            .collect())
    }
}

/// Parses a checkpoint, converting stored values to `T` if needed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, Option<AdamState<T>>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = ModelConfig::from_kv(&r.str()?).map_err(Error::Checkpoint)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    let mut dtypes = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("bad dtype for {name}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.values::<T>(dtype, shape.iter().product())?;
        tensors.push((name, Tensor::from_vec(&shape, data)?));
        dtypes.push(dtype);
    }
    let numels: Vec<usize> = tensors.iter().map(|(_, t)| t.numel()).collect();
    let model = Model::from_params(config, tensors)?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for (&numel, &dtype) in numels.iter().zip(&dtypes) {
                first.push(r.values::<T>(dtype, numel)?);
                second.push(r.values::<T>(dtype, numel)?);
            }
            if step == 0 {
                first.clear();
                second.clear();
            }
            Some(AdamState::from_parts(config, step, first, second))
        }
        flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, optimizer))
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save<T: Scalar>(path: &Path, model: &Model<T>, optimizer: Option<&AdamState<T>>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, optimizer)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, Option<AdamState<T>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only the element type of the first stored parameter.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    r.u32()?;
    r.str()?;
    if r.u32()? == 0 {
        return Err(Error::Checkpoint("no parameters".into()));
    }
    r.str()?;
    DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("bad dtype".into()))
}
