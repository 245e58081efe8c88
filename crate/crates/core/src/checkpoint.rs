//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CTXLMCKP"
//! version  u32
//! header   u32 length + UTF-8 JSON (free-form metadata, may be "{}")
//! count    u32
//! per tensor:
//!   name   u32 length + UTF-8
//!   rank   u32, then rank x u64 dims
//!   values prod(dims) x f64 bit patterns, row-major
//! ```
//!
//! Values are stored as raw bit patterns, so a load after save is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor, TensorError};

pub const MAGIC: &[u8; 8] = b"CTXLMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    header: &str,
    params: &ParamStore,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_str(w, header)?;
    write_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_str(w, name)?;
        write_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(String, ParamStore), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header = read_str(r)?;
    let count = read_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 2 {
            return Err(CheckpointError::Corrupt(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| read_u64(r).map(f64::from_bits))
            .collect::<std::io::Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(shape, values)?)?;
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &str, params: &ParamStore) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, header, params)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamStore), CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in proptest::collection::vec(any::<f64>(), 6),
            b in proptest::collection::vec(-1e300f64..1e300, 1..20),
        ) {
            let mut p = ParamStore::new();
            p.insert("m", Tensor::new(vec![2, 3], a.clone()).unwrap()).unwrap();
            p.insert("v", Tensor::new(vec![b.len()], b.clone()).unwrap()).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, "{\"k\":1}", &p).unwrap();
            let (header, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(header, "{\"k\":1}");
            prop_assert_eq!(back.len(), 2);
            for ((n1, t1), (n2, t2)) in p.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&t1.shape, &t2.shape);
                let bits1: Vec<u64> = t1.values.iter().map(|v| v.to_bits()).collect();
                let bits2: Vec<u64> = t2.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits1, bits2);
            }
        }
    }

    #[test]
    fn rejects_other_files() {
        let err = read_checkpoint(&mut &b"NOTACKPTxxxxxxxx"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&mut buf.as_slice()),
            Err(CheckpointError::Version(99))
        ));
    }
}
