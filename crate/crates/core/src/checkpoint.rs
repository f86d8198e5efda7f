//! `MRLAB1` checkpoint container.
//!
//! Layout:
//!
//! ```text
//! MRLAB1\n
//! section=<name>\n
//! <key>=<value>\n          (config block, sorted by key)
//! payload=<count>\n
//! <count little-endian f64>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &str = "MRLAB1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {MAGIC}")]
    BadMagic,
    #[error("expected section `{expected}`, found `{found}`")]
    WrongSection { expected: String, found: String },
    #[error("malformed header line: {0}")]
    Header(String),
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("payload has {found} values, expected {expected}")]
    PayloadSize { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub section: String,
    pub config: BTreeMap<String, String>,
    pub payload: Vec<f64>,
}

impl Container {
    pub fn new(section: &str) -> Self {
        Container {
            section: section.to_string(),
            config: BTreeMap::new(),
            payload: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self
            .config
            .get(key)
            .ok_or_else(|| CheckpointError::MissingKey(key.to_string()))?;
        raw.parse().map_err(|_| CheckpointError::BadValue {
            key: key.to_string(),
            value: raw.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * 8);
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("section={}\n", self.section).as_bytes());
        for (k, v) in &self.config {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(format!("payload={}\n", self.payload.len()).as_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut reader = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |reader: &mut std::io::Cursor<&[u8]>| -> Result<String, CheckpointError> {
            line.clear();
            reader.read_line(&mut line)?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut reader)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let section = next_line(&mut reader)?;
        let section = section
            .strip_prefix("section=")
            .ok_or_else(|| CheckpointError::Header(section.clone()))?
            .to_string();
        let mut config = BTreeMap::new();
        let count = loop {
            let l = next_line(&mut reader)?;
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(l.clone()))?;
            if k == "payload" {
                break v
                    .parse::<usize>()
                    .map_err(|_| CheckpointError::Header(l.clone()))?;
            }
            config.insert(k.to_string(), v.to_string());
        };
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        if raw.len() != count * 8 {
            return Err(CheckpointError::PayloadSize {
                expected: count,
                found: raw.len() / 8,
            });
        }
        let payload = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Container {
            section,
            config,
            payload,
        })
    }

    pub fn expect_section(&self, name: &str) -> Result<(), CheckpointError> {
        if self.section != name {
            return Err(CheckpointError::WrongSection {
                expected: name.to_string(),
                found: self.section.clone(),
            });
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Hex SHA-256 of a parameter payload.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
