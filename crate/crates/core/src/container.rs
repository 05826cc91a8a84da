//! Binary tensor container shared by datasets and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SYNP"
//! version    u16
//! header     u32 length + UTF-8 JSON
//! count      u32
//! records    count x { u16 name length, name, u8 ndim, ndim x u64 dims, f64 payload }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SYNP";
pub const VERSION: u16 = 1;

/// Free-form metadata stored ahead of the records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    /// Names of parameters updated during training, for freeze audits.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trainable: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Decoded container: header, tensors, and the byte offset of each record.
#[derive(Clone, Debug)]
pub struct Container {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
    pub offsets: BTreeMap<String, u64>,
}

/// Serializes records in the given order. Returns the bytes and record offsets.
pub fn encode<'a>(
    header: &Header,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(Vec<u8>, BTreeMap<String, u64>)> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let h = serde_json::to_vec(header)?;
    buf.extend_from_slice(&(h.len() as u32).to_le_bytes());
    buf.extend_from_slice(&h);
    let records: Vec<_> = records.into_iter().collect();
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    let mut offsets = BTreeMap::new();
    for (name, t) in records {
        if offsets.insert(name.to_string(), buf.len() as u64).is_some() {
            return Err(Error::Invalid(format!("duplicate record `{name}`")));
        }
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.ndim() > u8::MAX as usize {
            return Err(Error::Invalid(format!("record `{name}` cannot be encoded")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((buf, offsets))
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
            .ok_or_else(|| {
                Error::Format(format!("truncated at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    let mut offsets = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| Error::Format(format!("record `{name}` has an oversized shape")))?;
        let payload = r.take(numel * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("record `{name}`: {e}")))?;
        offsets.insert(name.clone(), start);
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Container {
        header,
        tensors,
        offsets,
    })
}

/// Writes the whole file through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Saves named tensors in name order.
pub fn save_checkpoint(
    params: &BTreeMap<String, Tensor>,
    header: &Header,
    path: &Path,
) -> Result<()> {
    let (bytes, _) = encode(header, params.iter().map(|(k, v)| (k.as_str(), v)))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Header, BTreeMap<String, Tensor>)> {
    let c = read(path)?;
    Ok((c.header, c.tensors))
}
