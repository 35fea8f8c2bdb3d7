//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DRNT"  version:u16  count:u32
//! per tensor: name_len:u32  name:utf8  rank:u8  extents:u32[rank]  payload:f32[prod(extents)]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRNT";
pub const VERSION: u16 = 1;

fn format_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    })
}

pub fn write_tensors<W: Write, F: Scalar>(mut w: W, tensors: &[(&str, &Tensor<F>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        if t.rank() > u8::MAX as usize {
            return format_err(format!("tensor {name} has rank {}", t.rank()));
        }
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).or_else(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            format_err("unexpected end of file")
        } else {
            Err(e.into())
        }
    })?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return format_err("bad magic");
    }
    let version = u16::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return format_err(format!("unsupported version {version}"));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).or_else(|_| format_err("tensor name is not UTF-8"))?;
        let rank = read_array::<1, _>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Writes every parameter of `store` under its registered name.
pub fn save_params<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor<F>)> = store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    write_tensors(BufWriter::new(File::create(path)?), &entries)
}

/// Loads a checkpoint into an identically structured store. Every parameter
/// must be present with a matching shape.
pub fn load_params<F: Scalar>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    if tensors.len() != store.len() {
        return format_err(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        ));
    }
    for (name, t) in tensors {
        let Some(id) = store.lookup(&name) else {
            return format_err(format!("unknown tensor {name}"));
        };
        if store.value(id).shape() != t.shape() {
            return format_err(format!(
                "tensor {name}: shape {:?} in file, {:?} in model",
                t.shape(),
                store.value(id).shape()
            ));
        }
        *store.value_mut(id) = t.cast();
    }
    Ok(())
}
