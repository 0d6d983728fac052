//! Versioned tensor container used for model and training checkpoints.
//!
//! Layout: 8-byte magic, `u32` schema version, `u32` header length, a JSON
//! header describing every tensor, then the tensors as little-endian `f64`
//! in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IMMUNCKP";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub schema_version: u32,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&(TensorEntry, Vec<f64>)> {
        self.tensors.iter().find(|(e, _)| e.name == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = ContainerHeader {
            schema_version: SCHEMA_VERSION,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for (entry, data) in &self.tensors {
            debug_assert_eq!(entry.shape.iter().product::<usize>(), data.len());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write to a sibling file first so an interrupted save never leaves
        // a truncated checkpoint under the final name.
        let tmp = path.with_extension("partial");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ArtifactMissing(path.display().to_string()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Version("checkpoint is truncated".into());
        if bytes.len() < 16 {
            return Err(short());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Version("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SCHEMA_VERSION {
            return Err(Error::Version(format!(
                "schema version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(16..16 + hlen).ok_or_else(short)?;
        let header: ContainerHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Version(format!("unreadable header: {e}")))?;
        if header.schema_version != version {
            return Err(Error::Version("header and preamble versions disagree".into()));
        }
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(offset..offset + 8 * n).ok_or_else(short)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            tensors.push((entry, data));
        }
        if offset != bytes.len() {
            return Err(Error::Version("trailing bytes after tensor payload".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}
