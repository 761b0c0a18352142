//! Binary checkpoint format.
//!
//! ```text
//! "RESIM1"            6 bytes
//! version             u32
//! config length       u32, followed by the config text (UTF-8)
//! config digest       32 bytes, SHA-256 of the config text
//! entry count         u32
//! manifest entries    name length u16, name, kind u8, rank u8, dims u32 x rank, offset u64
//! data                little-endian f32, entries back to back in declaration order
//! ```
//!
//! Offsets are relative to the start of the data section. All integers are little-endian.

use super::params::{ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 6] = b"RESIM1";
const VERSION: u32 = 1;

/// Query and key parameters together with the config they were trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub query: ParamSet<f32>,
    pub key: ParamSet<f32>,
}

impl Checkpoint {
    pub fn config_digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries: Vec<_> = [("query", &self.query), ("key", &self.key)]
            .into_iter()
            .flat_map(|(prefix, ps)| ps.iter().map(move |(n, k, v)| (format!("{prefix}.{n}"), k, v)))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.config_text.len())?.to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.config_digest());
        out.extend_from_slice(&len_u32(entries.len())?.to_le_bytes());
        let mut offset = 0u64;
        for (name, kind, v) in &entries {
            let nl = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&nl.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            let rank = u8::try_from(v.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in v.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * v.numel() as u64;
        }
        for (_, _, v) in &entries {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cl = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(cl)?)
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?
            .to_string();
        let digest: [u8; 32] = Sha256::digest(config_text.as_bytes()).into();
        if r.take(32)? != digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push((name, kind, shape, offset));
        }
        let data = &bytes[r.pos..];
        let mut query = ParamSet::new();
        let mut key = ParamSet::new();
        let mut expected = 0u64;
        for (name, kind, shape, offset) in manifest {
            if offset != expected {
                return Err(Error::Checkpoint(format!("{name}: offset {offset}, expected {expected}")));
            }
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let chunk = data
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: data truncated")))?;
            expected += 4 * n as u64;
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, values)?;
            if let Some(rest) = name.strip_prefix("query.") {
                query.add(rest, t, kind);
            } else if let Some(rest) = name.strip_prefix("key.") {
                key.add(rest, t, kind);
            } else {
                return Err(Error::Checkpoint(format!("entry '{name}' has no query/key prefix")));
            }
        }
        if expected as usize != data.len() {
            return Err(Error::Checkpoint("trailing bytes after data section".into()));
        }
        Ok(Checkpoint { config_text, query, key })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
