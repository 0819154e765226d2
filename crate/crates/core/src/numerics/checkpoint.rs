//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPNPCKPT"
//! version    u32      currently 1
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of parameters
//! per parameter:
//!   name_len u32, name bytes (UTF-8)
//!   width    u8       4 = f32 values, 8 = f64 values
//!   ndim     u32, then ndim x u64 dimensions
//!   values   product(dims) x width bytes
//! ```
//!
//! The metadata block carries the run configuration so a checkpoint is
//! self-describing.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SPNPCKPT";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub meta: String,
    pub params: ParamStore<f64>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
}

pub fn write_checkpoint<T: Scalar>(
    w: &mut impl Write,
    meta: &str,
    params: &ParamStore<T>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    put_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[T::WIDTH])?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if T::WIDTH == 4 {
                w.write_all(&(v as f32).to_le_bytes())?;
            } else {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = get_u32(r)? as usize;
    let meta = get_string(r, meta_len)?;
    let count = get_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        let name = get_string(r, name_len)?;
        let mut width = [0u8; 1];
        r.read_exact(&mut width)?;
        let ndim = get_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match width[0] {
            4 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            8 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
            w => return Err(Error::Format(format!("parameter {name}: unknown width {w}"))),
        };
        params.add(name, Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { meta, params })
}

pub fn save(path: &std::path::Path, meta: &str, params: &ParamStore<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, meta, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            meta in "[a-z_=0-9\n ]{0,40}",
        ) {
            let mut p = ParamStore::new();
            p.add("a.w", Tensor::from_matrix(1, vals.len(), vals.clone()));
            p.add("b", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &meta, &p).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.meta, meta);
            prop_assert_eq!(back.params, p);
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let p: ParamStore<f64> = ParamStore::new();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", &p).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut bad = buf;
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
