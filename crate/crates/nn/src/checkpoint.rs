//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "EHRTCKPT"
//! version   u32      = 1
//! count     u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, extents u32 × rank
//!   data     f32 × product(extents)
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EHRTCKPT";
pub const VERSION: u32 = 1;

fn io(e: std::io::Error) -> NnError {
    NnError::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC).map_err(io)?;
    put_u32(w, VERSION)?;
    put_u32(w, store.len() as u32)?;
    for (_, name, t) in store.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for &x in t.data() {
            w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}
