//! Checkpoint format: magic "TMCK", one version byte, a key=value text
//! header, then length-prefixed records of (name, shape, little-endian f32).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"TMCK";
pub const VERSION: u8 = 1;

/// Serialize named tensors with a key=value metadata header.
///
/// Records are written in the order given, so serialization is deterministic
/// when the caller's iteration order is.
pub fn write_checkpoint<W: Write>(
    out: &mut W,
    meta: &BTreeMap<String, String>,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    let header: String =
        meta.iter().map(|(k, v)| format!("{}={}\n", k, v)).collect::<Vec<_>>().join("");
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header.as_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.write_all(&(nb.len() as u32).to_le_bytes())?;
        out.write_all(nb)?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint back into (metadata, named tensors).
pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(BTreeMap<String, String>, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", magic)));
    }
    let mut ver = [0u8; 1];
    input.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", ver[0])));
    }
    let header_len = read_u32(input)? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut meta = BTreeMap::new();
    for line in header.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let count = read_u32(input)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u32(input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input.read_exact(&mut raw)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok((meta, tensors))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// SHA-256 of the serialized form; used to verify parameters stayed frozen.
pub fn checkpoint_digest(meta: &BTreeMap<String, String>, tensors: &[(String, &Tensor)]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, meta, tensors).expect("in-memory write");
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.finalize().into()
}
