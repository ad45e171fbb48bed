//! `PQT1` tensor files.
//!
//! Layout, all little-endian:
//! - magic: the four ASCII bytes `PQT1`
//! - dims: four `u32` values `N, C, H, W`
//! - data: `N*C*H*W` `f32` values in NCHW order
//!
//! Nothing may follow the data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ActivationTensor, Shape};

pub const MAGIC: [u8; 4] = *b"PQT1";

pub fn write_tensor<W: Write>(mut out: W, tensor: &ActivationTensor) -> Result<()> {
    out.write_all(&MAGIC)?;
    for d in tensor.shape().dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.data().len() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<ActivationTensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"PQT1\"")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        read_exact(&mut input, &mut b, "header")?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("element count overflows for {dims:?}")))?;

    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != numel * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {} for shape {shape}",
            bytes.len(),
            numel * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ActivationTensor::new(shape, data)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn save(path: impl AsRef<Path>, tensor: &ActivationTensor) -> Result<()> {
    let file = File::create(path)?;
    write_tensor(BufWriter::new(file), tensor)
}

pub fn load(path: impl AsRef<Path>) -> Result<ActivationTensor> {
    let file = File::open(path)?;
    read_tensor(BufReader::new(file))
}
