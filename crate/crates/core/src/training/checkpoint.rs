//! Checkpoint files: schema-versioned binary parameter dumps with lineage.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MDCKPT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Stage1,
    Stage2,
    Stage3,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageTag::Stage1 => write!(f, "stage1"),
            StageTag::Stage2 => write!(f, "stage2"),
            StageTag::Stage3 => write!(f, "stage3"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub stage: StageTag,
    pub config_hash: String,
    /// File hash of the checkpoint this one was trained from.
    pub parent_hash: Option<String>,
    pub vocab_version: u32,
    /// Module prefixes frozen from this stage onward.
    pub frozen: Vec<String>,
    /// Content hashes of each module's parameters at save time.
    pub module_hashes: BTreeMap<String, String>,
    /// Ablation arm identifier ("baseline" for the unmodified stack).
    pub arm: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported schema version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("lineage violation: {0}")]
    Lineage(String),
    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),
}

impl Checkpoint {
    /// Serialize deterministically and return the file hash.
    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, (shape, data)) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(crate::util::sha256_hex(&buf))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut off = 8;
        let read_u64 = |bytes: &[u8], off: &mut usize| -> Result<u64, CheckpointError> {
            if *off + 8 > bytes.len() {
                return Err(CheckpointError::Corrupt("truncated".into()));
            }
            let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            Ok(v)
        };
        let hlen = read_u64(&bytes, &mut off)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(CheckpointError::BadVersion(header.schema_version));
        }
        off += hlen;
        let n = read_u64(&bytes, &mut off)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n {
            if off + 4 > bytes.len() {
                return Err(CheckpointError::Corrupt("truncated name".into()));
            }
            let nlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            let name = String::from_utf8(bytes[off..off + nlen].to_vec())
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            off += nlen;
            let ndim = bytes[off] as usize;
            off += 1;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&bytes, &mut off)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                if off + 8 > bytes.len() {
                    return Err(CheckpointError::Corrupt("truncated data".into()));
                }
                data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
                off += 8;
            }
            params.insert(name, (shape, data));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn file_hash(path: &Path) -> Result<String, CheckpointError> {
        Ok(crate::util::sha256_file(path)?)
    }

    /// True if any parameter name starts with the prefix.
    pub fn has_module(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }
}
