//! Single-file binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FANUNET1"
//! endian   1 byte   1 = little-endian payloads
//! meta_len u32      length of the JSON metadata blob
//! meta     bytes    UTF-8 JSON (config echo and bookkeeping)
//! count    u32      number of tensor records
//! record:
//!   name_len u32, name bytes (UTF-8)
//!   dtype    u8    0 = f32, 1 = f64
//!   ndim     u32, dims u64 x ndim
//!   payload  numel x dtype-size bytes, little-endian scalars
//! ```
//!
//! f32 payloads round-trip exactly through the f64 values used in memory.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{fl, Element, Tensor};

const MAGIC: &[u8; 8] = b"FANUNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn of<E: Element>() -> DType {
        if std::mem::size_of::<E>() == 4 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

/// One stored tensor: values are held as f64 regardless of on-disk dtype.
#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub values: Vec<f64>,
}

/// A parsed checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialize named tensors plus a JSON metadata blob to `path`.
pub fn save<E: Element>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor<E>)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[1u8])?; // little-endian payloads
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| bad(e.to_string()))?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let dtype = DType::of::<E>();
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[match dtype {
            DType::F32 => 0u8,
            DType::F64 => 1u8,
        }])?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let data = t.data();
        match dtype {
            DType::F32 => {
                for &v in data.iter() {
                    w.write_all(&(fl(v) as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for &v in data.iter() {
                    w.write_all(&fl(v).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a checkpoint file written by [`save`].
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| bad(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(bad(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let mut endian = [0u8; 1];
    r.read_exact(&mut endian)?;
    if endian[0] != 1 {
        return Err(bad(format!("unsupported endianness tag {}", endian[0])));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value =
        serde_json::from_slice(&meta_bytes).map_err(|e| bad(format!("metadata is not valid JSON: {e}")))?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|e| bad(format!("tensor name: {e}")))?;
        let mut dtype_byte = [0u8; 1];
        r.read_exact(&mut dtype_byte)?;
        let dtype = match dtype_byte[0] {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(bad(format!("unknown dtype tag {other} for {name}"))),
        };
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        match dtype {
            DType::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    values.push(f32::from_le_bytes(b) as f64);
                }
            }
            DType::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut b)?;
                    values.push(f64::from_le_bytes(b));
                }
            }
        }
        tensors.push(TensorRecord { name, shape, dtype, values });
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Copy stored values into matching named parameters, failing on any
/// missing name or shape mismatch.
pub fn restore_parameters<E: Element>(ckpt: &Checkpoint, params: &[(String, Tensor<E>)]) -> Result<()> {
    for (name, tensor) in params {
        let rec = ckpt
            .tensor(name)
            .ok_or_else(|| bad(format!("checkpoint is missing tensor '{name}'")))?;
        if rec.shape != tensor.shape() {
            return Err(bad(format!(
                "tensor '{name}' has shape {:?} in checkpoint but {:?} in model",
                rec.shape,
                tensor.shape()
            )));
        }
        tensor
            .set_data(rec.values.iter().map(|&v| crate::tensor::c::<E>(v)).collect())
            .map_err(Error::Tensor)?;
    }
    Ok(())
}
