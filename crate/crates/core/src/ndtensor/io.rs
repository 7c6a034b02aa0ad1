//! `NDT1` binary tensor files.
//!
//! Layout: the four ASCII bytes `NDT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the row-major `f64` payload in
//! little-endian order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const NDT_MAGIC: &[u8; 4] = b"NDT1";

pub fn write_ndt_to<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(NDT_MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ndt_from<R: Read>(mut r: R, source: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::parse(source, format!("missing magic: {e}")))?;
    if &magic != NDT_MAGIC {
        return Err(Error::parse(source, format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|e| Error::parse(source, format!("missing rank: {e}")))?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::parse(source, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)
            .map_err(|e| Error::parse(source, format!("truncated dims: {e}")))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::parse(source, format!("truncated payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn write_ndt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ndt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_ndt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path)?);
    read_ndt_from(r, &path.display().to_string())
}
