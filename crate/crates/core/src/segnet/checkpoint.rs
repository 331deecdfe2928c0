//! Single-model checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ASEG"                      magic
//! u32 version                 currently 1
//! u32 stage_index
//! u32 config_len, [u8]        model config as canonical `key = value` text
//! u32 tensor_count
//! repeated tensor_count times:
//!   u16 name_len, [u8] name   UTF-8
//!   u8 ndims (= 4), u32 × ndims dims
//!   f32 × numel               IEEE-754 binary32
//! u32 crc32                   CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"ASEG";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.stage_index() as u32).to_le_bytes());
    let config = model.config().to_string();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.tensors().len() as u32).to_le_bytes());
    for (name, t) in model.named() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("record overruns payload at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::MalformedCheckpoint("invalid UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::Checksum);
    }

    let mut r = Reader { bytes: payload, pos: 8 };
    let stage_index = r.u32()? as usize;
    let config_len = r.u32()? as usize;
    let config = ModelConfig::from_kv_text(r.str(config_len)?)
        .map_err(|e| Error::MalformedCheckpoint(format!("embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.str(name_len)?.to_string();
        let ndims = r.u8()?;
        if ndims != 4 {
            return Err(Error::MalformedCheckpoint(format!("tensor '{name}' has {ndims} dims")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel().checked_mul(4).ok_or_else(|| {
            Error::MalformedCheckpoint(format!("tensor '{name}' is too large"))
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        named.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != payload.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes after tensor table",
            payload.len() - r.pos
        )));
    }
    Model::from_parts(config, stage_index, named).map_err(|e| Error::MalformedCheckpoint(e.to_string()))
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
