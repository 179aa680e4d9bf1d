//! Versioned binary key-value store of named parameter tensors.
//!
//! Layout (little endian): magic `FSCK`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, UTF-8 name, four `u64` extents, and
//! the `f64` values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u32 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
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

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ckpt_err("parameter name is not UTF-8"))?;
        let mut shape = [0usize; 4];
        for e in &mut shape {
            *e = read_u64(r)? as usize;
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| ckpt_err("shape overflow"))?;
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        store.insert(name, Tensor4::from_vec(shape, data)?);
    }
    Ok(store)
}

/// Copies every entry of `src` whose name and shape match one in `dst`.
/// Returns the names that were loaded.
pub fn load_matching<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Vec<String> {
    let mut loaded = Vec::new();
    for (name, t) in src.iter() {
        if dst.get(name).is_some_and(|d| d.shape() == t.shape()) && dst.set(name, t.clone()).is_ok() {
            loaded.push(name.to_string());
        }
    }
    loaded
}
