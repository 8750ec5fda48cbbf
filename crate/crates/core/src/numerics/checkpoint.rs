//! Binary parameter snapshots.
//!
//! Layout (little-endian): magic `PPACCKPT`, version u32, embedding dim u32,
//! num_users u32, num_items u32, model tag u8, 32-byte dataset hash,
//! metadata length u32 + UTF-8 JSON, parameter count u32, then per parameter:
//! name length u32 + UTF-8 name, ndim u32, dims u32 each, raw f32 values.

use std::io::{Read, Write};

use super::{NumericsError, ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"PPACCKPT";
const VERSION: u32 = 1;
const MAX_STRING: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub dim: u32,
    pub num_users: u32,
    pub num_items: u32,
    pub model_tag: u8,
    pub dataset_hash: [u8; 32],
    /// Free-form JSON describing how to rebuild the model.
    pub metadata: String,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string(r: &mut impl Read, what: &str) -> Result<String, NumericsError> {
    let len = get_u32(r)?;
    if len > MAX_STRING {
        return Err(NumericsError::Checkpoint(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| NumericsError::Checkpoint(format!("{what} is not UTF-8")))
}

fn to_u32(v: usize, what: &str) -> Result<u32, NumericsError> {
    u32::try_from(v).map_err(|_| NumericsError::Checkpoint(format!("{what} {v} exceeds u32")))
}

/// Writes every parameter of `store` in id order.
pub fn write_checkpoint(
    w: &mut impl Write,
    header: &CheckpointHeader,
    store: &ParameterStore,
) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, header.dim)?;
    put_u32(w, header.num_users)?;
    put_u32(w, header.num_items)?;
    w.write_all(&[header.model_tag])?;
    w.write_all(&header.dataset_hash)?;
    put_u32(w, to_u32(header.metadata.len(), "metadata length")?)?;
    w.write_all(header.metadata.as_bytes())?;
    put_u32(w, to_u32(store.len(), "parameter count")?)?;
    for id in store.ids() {
        let name = store.name(id);
        put_u32(w, to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        let t = store.value(id);
        put_u32(w, to_u32(t.shape().len(), "ndim")?)?;
        for &d in t.shape() {
            put_u32(w, to_u32(d, "dimension")?)?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads a checkpoint into a header and a fresh store (optimizer state zeroed).
pub fn read_checkpoint(r: &mut impl Read) -> Result<(CheckpointHeader, ParameterStore), NumericsError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let dim = get_u32(r)?;
    let num_users = get_u32(r)?;
    let num_items = get_u32(r)?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let mut dataset_hash = [0u8; 32];
    r.read_exact(&mut dataset_hash)?;
    let metadata = get_string(r, "metadata")?;
    let count = get_u32(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name = get_string(r, "parameter name")?;
        let ndim = get_u32(r)?;
        if ndim > 8 {
            return Err(NumericsError::Checkpoint(format!("{name}: ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(get_u32(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 31))
            .ok_or_else(|| NumericsError::Checkpoint(format!("{name}: shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.add(&name, Tensor::new(shape, data)?)?;
    }
    Ok((
        CheckpointHeader {
            dim,
            num_users,
            num_items,
            model_tag: tag[0],
            dataset_hash,
            metadata,
        },
        store,
    ))
}
