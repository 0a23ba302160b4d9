//! Binary checkpoint container.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! magic        8 bytes  "TESCKPT\0"
//! version      u32      1
//! adam         f64 x 4  lr, beta1, beta2, eps
//! model count  u32
//! per model:
//!   name       u32 length + UTF-8
//!   spec       u32 length + UTF-8 JSON layer list
//!   step       u64      Adam step counter
//!   params     u32 count
//!   per param:
//!     name     u32 length + UTF-8
//!     ndim     u32, then ndim x u64 dims
//!     data     f64 x len, then Adam m (f64 x len), then Adam v (f64 x len)
//! ```
//!
//! Values are stored bit-for-bit, so save -> load -> save is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::adam::AdamConfig;
use super::layer::NetworkSpec;
use super::model::{AdamState, Model, ParamMap};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TESCKPT\0";
const VERSION: u32 = 1;

/// A set of named models sharing one optimizer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adam: AdamConfig,
    pub models: Vec<(String, Model)>,
}

impl Checkpoint {
    pub fn single(name: &str, model: Model, adam: AdamConfig) -> Self {
        Checkpoint {
            adam,
            models: vec![(name.to_string(), model)],
        }
    }

    pub fn get(&self, name: &str) -> Option<&Model> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn take(&mut self, name: &str) -> Result<Model> {
        let pos = self
            .models
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no model named {name}")))?;
        Ok(self.models.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            put_f64(&mut out, v);
        }
        put_u32(&mut out, self.models.len() as u32);
        for (name, model) in &self.models {
            put_str(&mut out, name);
            put_str(&mut out, &serde_json::to_string(model.spec())?);
            out.extend_from_slice(&model.opt_state().t.to_le_bytes());
            put_u32(&mut out, model.params().len() as u32);
            for (pname, p) in model.params() {
                put_str(&mut out, pname);
                put_u32(&mut out, p.shape().len() as u32);
                for &d in p.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                let st = model.opt_state();
                for t in [p, &st.m[pname], &st.v[pname]] {
                    for &v in t.data() {
                        put_f64(&mut out, v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
        }
        let adam = AdamConfig {
            lr: get_f64(&mut r)?,
            beta1: get_f64(&mut r)?,
            beta2: get_f64(&mut r)?,
            eps: get_f64(&mut r)?,
        };
        let count = get_u32(&mut r)?;
        let mut models = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = get_str(&mut r)?;
            let spec: NetworkSpec = serde_json::from_str(&get_str(&mut r)?)?;
            let t = get_u64(&mut r)?;
            let n_params = get_u32(&mut r)?;
            let mut params = ParamMap::new();
            let mut m = ParamMap::new();
            let mut v = ParamMap::new();
            for _ in 0..n_params {
                let pname = get_str(&mut r)?;
                let ndim = get_u32(&mut r)?;
                let shape = (0..ndim)
                    .map(|_| get_u64(&mut r).map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let mut read_tensor = || -> Result<Tensor> {
                    let data = (0..len).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?;
                    Tensor::new(shape.clone(), data)
                };
                params.insert(pname.clone(), read_tensor()?);
                m.insert(pname.clone(), read_tensor()?);
                v.insert(pname, read_tensor()?);
            }
            let model = Model::from_parts(spec, params, AdamState { t, m, v })?;
            models.push((name, model));
        }
        if !r.is_empty() {
            return Err(Error::invalid(format!("{} trailing bytes in checkpoint", r.len())));
        }
        Ok(Checkpoint { adam, models })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::invalid("checkpoint is truncated")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut &[u8]) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    if r.len() < len {
        return Err(Error::invalid("checkpoint is truncated"));
    }
    let (s, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| Error::invalid("checkpoint string is not UTF-8"))
}
