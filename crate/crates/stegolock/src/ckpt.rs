//! Versioned binary checkpoint container: JSON metadata plus named f32
//! parameter arrays.
//!
//! Layout (all integers little-endian):
//! `"SLCK" | u32 version | u64 meta_len | meta JSON | u64 n_tensors |`
//! then per tensor: `u64 name_len | name | u64 ndim | u64 dims[] | f32 data[]`.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SLCK";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    /// Copy stored values into an existing set of named parameters.
    pub fn load_into(&self, named: &[(String, Var)]) -> Result<()> {
        for (name, var) in named {
            let t = self.tensor(name)?;
            if t.shape() != var.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?}: shape {:?} does not match parameter {:?}",
                    t.shape(),
                    var.shape()
                )));
            }
            var.set(t)?;
        }
        Ok(())
    }
}

pub fn save(path: impl AsRef<Path>, meta: &Value, named: &[(String, Var)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    f.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&meta_bytes)?;
    f.write_all(&(named.len() as u64).to_le_bytes())?;
    for (name, var) in named {
        f.write_all(&(name.len() as u64).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        let dims = var.shape().dims();
        f.write_all(&(dims.len() as u64).to_le_bytes())?;
        for &d in dims {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        let data = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        for x in data {
            f.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>, dev: &Device) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{:?} is not a stegolock checkpoint", path.as_ref())));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u64(&mut f)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)?;
    let meta: Value = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format(e.to_string()))?;
    let n = read_u64(&mut f)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u64(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u64(&mut f)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut f)? as usize);
        }
        let len: usize = dims.iter().product();
        let mut bytes = vec![0u8; len * 4];
        f.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::from_vec(data, dims, dev)?));
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
