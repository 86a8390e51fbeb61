//! Flat binary container of named tensors.
//!
//! Layout, all integers little-endian u64:
//!
//! ```text
//! "XSMCKPT1" | count | { name_len | name (UTF-8) | rank | dims… | f32 payload (LE) }*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XSMCKPT1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Checkpoint(format!("truncated payload for {name}: {e}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensors(std::io::BufWriter::new(f), tensors).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(std::io::BufReader::new(f))
}
