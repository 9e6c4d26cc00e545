//! RFMP parameter checkpoints.
//!
//! ```text
//! "RFMP" | u8 version = 1 | u32 count
//! per entry: u16 name length | name (UTF-8) | u8 rank | u32 extent × rank | f32 × Π extents
//! ```
//!
//! All integers and floats are little-endian. Entries appear in store order.

use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RFMP";
const VERSION: u8 = 1;

pub fn checkpoint_bytes<T: Scalar>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let fmt = |e: std::io::Error| Error::Format(e.to_string());
    let mut w = LeWriter::new(Vec::new());
    w.bytes(MAGIC).map_err(fmt)?;
    w.u8(VERSION).map_err(fmt)?;
    w.u32(params.len() as u32).map_err(fmt)?;
    for (name, p) in params.iter() {
        w.name(name).map_err(fmt)?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Format(format!("rank of '{name}' too large")))?;
        w.u8(rank).map_err(fmt)?;
        for &e in shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Format(format!("extent of '{name}' too large")))?;
            w.u32(e).map_err(fmt)?;
        }
        for &v in p.value.data() {
            w.f32(v.as_f64() as f32).map_err(fmt)?;
        }
    }
    Ok(w.into_inner())
}

pub fn parse_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = LeReader::new(bytes);
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Format("not an RFMP checkpoint".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let mut out = ParamStore::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let values = r.f32s(n)?;
        if out.contains(&name) {
            return Err(Error::Format(format!("duplicate parameter '{name}'")));
        }
        let data = values.into_iter().map(|v| T::lit(v as f64)).collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    r.expect_end()?;
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
