//! The `MCNN1` weight file.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "MCNN1" count { name_len name rank extents[rank] f32le[prod(extents)] }*count crc32
//! ```
//!
//! The CRC-32 covers every byte before it. Parameters are stored at f32, so
//! a save/load round trip is exact at 32-bit precision.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::model::ModelGraph;
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 5] = b"MCNN1";

/// Tensors as stored: name to (extents, f32 payload).
pub type RawTensors = IndexMap<String, (Vec<usize>, Vec<f32>)>;

pub fn encode_weights(model: &ModelGraph) -> Vec<u8> {
    let mut buf = Vec::with_capacity(model.count_parameters() * 4 + 4096);
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, model.params().len());
    for (name, t) in model.params() {
        push_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.rank());
        for &d in t.shape() {
            push_u32(&mut buf, d);
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("weight file fields fit in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

/// Parses and CRC-checks a weight file image.
pub fn decode_weights(bytes: &[u8]) -> Result<RawTensors> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Corrupt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("bad magic, expected MCNN1".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corrupt(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let count = r.u32("tensor count")?;
    let mut out = IndexMap::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("{name}: extents overflow")))?;
        let payload = r.take(n, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes before CRC", body.len() - r.pos)));
    }
    Ok(out)
}

/// Checks names and extents of `raw` against `model` and installs them.
/// The model is untouched unless every tensor matches.
pub fn apply_weights(model: &mut ModelGraph, raw: RawTensors) -> Result<()> {
    for (name, (shape, _)) in &raw {
        match model.param(name) {
            None => return Err(Error::Incompatible(format!("unknown tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Incompatible(format!(
                    "tensor {name} has extents {shape:?}, model expects {:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(missing) = model.params().keys().find(|k| !raw.contains_key(*k)) {
        return Err(Error::Incompatible(format!("tensor {missing} missing from file")));
    }
    for (name, (shape, data)) in raw {
        let t = Tensor::new(&shape, data.into_iter().map(f64::from).collect())?;
        model.set_param(&name, t)?;
    }
    Ok(())
}

pub fn save_weights(model: &ModelGraph, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(model))
}

pub fn load_weights(model: &mut ModelGraph, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    apply_weights(model, decode_weights(&bytes)?)
}

/// Writes via a temp file in the same directory, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
