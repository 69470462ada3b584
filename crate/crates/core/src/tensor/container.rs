//! Flat binary container for named f64 tensors, used by all checkpointing.
//!
//! Layout, all integers little-endian u64:
//! magic `FCT1` | count | records. Each record: name length | name bytes
//! (UTF-8) | rank | dims | f64 payload (little-endian, row-major).

use super::{Tensor, TensorError};
use std::fmt;
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"FCT1";

#[derive(Debug)]
pub enum ContainerError {
    Io(std::io::Error),
    Format(String),
    Tensor(TensorError),
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Io(e) => write!(f, "container io: {e}"),
            ContainerError::Format(m) => write!(f, "container format: {m}"),
            ContainerError::Tensor(e) => write!(f, "container tensor: {e}"),
        }
    }
}

impl std::error::Error for ContainerError {}

impl From<std::io::Error> for ContainerError {
    fn from(e: std::io::Error) -> Self {
        ContainerError::Io(e)
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<(), ContainerError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, ContainerError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes `(name, tensor)` records in the given order. Gradients and
/// trainability flags are not part of the container.
pub fn write_container(
    w: &mut impl Write,
    tensors: &[(String, Tensor)],
) -> Result<(), ContainerError> {
    w.write_all(MAGIC)?;
    write_u64(w, tensors.len() as u64)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        write_u64(w, bytes.len() as u64)?;
        w.write_all(bytes)?;
        write_u64(w, t.shape().len() as u64)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads records back in file order.
pub fn read_container(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::Format(format!(
            "bad magic {magic:?}, expected FCT1"
        )));
    }
    let count = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ContainerError::Format(format!("tensor name not UTF-8: {e}")))?;
        let rank = read_u64(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data).map_err(ContainerError::Tensor)?;
        out.push((name, tensor));
    }
    Ok(out)
}
