//! Checkpoint container shared by every model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CVOCKPT\x01"
//! offset 8   u32       header length H in bytes
//! offset 12  H bytes   UTF-8 JSON header
//! then       f64 LE    section payloads, concatenated in header order
//! ```
//!
//! The header is `{"version": 1, "meta": <model metadata>, "sections":
//! [{"name": .., "len": ..}, ..]}` where `len` counts f64 values. Integer
//! data (tree structure, indices) is stored as exactly representable f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CVOCKPT\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    sections: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            sections: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.sections.insert(name.into(), data);
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    /// Copies every section of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: Checkpoint) {
        for (k, v) in other.sections {
            self.sections.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Sections whose name starts with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str, meta: serde_json::Value) -> Checkpoint {
        let sections = self
            .sections
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        Checkpoint { meta, sections }
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|(k, v)| SectionInfo {
                    name: k.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let len =
            u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let payload: usize = self.sections.values().map(Vec::len).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.sections.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let mut pos = 12 + len;
        let mut sections = BTreeMap::new();
        for s in header.sections {
            let end = pos + 8 * s.len;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated section {}", s.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.insert(s.name, data);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(
                "trailing bytes after last section".into(),
            ));
        }
        Ok(Self {
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test", "alpha": 0.1}));
        ck.insert("a", vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]);
        ck.insert("b", vec![]);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        let a: Vec<u64> = back
            .section("a")
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let e: Vec<u64> = ck
            .section("a")
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, e);
        assert!(back.section("c").is_err());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut ck = Checkpoint::new(serde_json::json!(null));
        ck.insert("a", vec![1.0, 2.0]);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
