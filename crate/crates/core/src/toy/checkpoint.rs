//! `.avckpt` files: the same preamble conventions as AVTRACE (magic, u32
//! version, u64 header length, JSON header, all least-significant-byte-first)
//! followed by every named tensor as raw f64 in layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamLayout, ToyCheckpoint, ToyModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_EXTENSION: &str = "avckpt";
const MAGIC: [u8; 4] = *b"AVCK";
const VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 16;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ToyModelConfig,
    tensors: Vec<TensorEntry>,
    train_loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(ckpt: &ToyCheckpoint, mut out: W) -> Result<u64> {
    ckpt.check()?;
    let layout = ckpt.layout();
    let header = Header {
        config: ckpt.config.clone(),
        tensors: layout
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        train_loss_history: ckpt.train_loss_history.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(PREAMBLE_LEN as usize + json.len() + 8 * ckpt.params.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in &ckpt.params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|source| Error::Io { offset: 0, source })?;
    Ok(bytes.len() as u64)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<ToyCheckpoint> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|source| Error::Io { offset: 0, source })?;
    let actual = bytes.len() as u64;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("not an .avckpt file (bad magic)".into()));
    }
    if actual < PREAMBLE_LEN {
        return Err(Error::Corruption {
            expected: PREAMBLE_LEN,
            actual,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload_start = PREAMBLE_LEN.saturating_add(json_len);
    if payload_start > actual {
        return Err(Error::Corruption {
            expected: payload_start,
            actual,
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN as usize..payload_start as usize])
        .map_err(|e| Error::Format(format!("unreadable checkpoint header: {e}")))?;
    header.config.check()?;
    let layout = ParamLayout::new(&header.config);
    let expected_tensors: Vec<TensorEntry> = layout
        .tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    if header.tensors != expected_tensors {
        return Err(Error::Format("tensor table does not match the config".into()));
    }
    let expected = payload_start + 8 * layout.total as u64;
    if expected != actual {
        return Err(Error::Corruption { expected, actual });
    }
    let params = bytes[payload_start as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ckpt = ToyCheckpoint {
        config: header.config,
        params,
        train_loss_history: header.train_loss_history,
    };
    ckpt.check()?;
    Ok(ckpt)
}

pub fn write_checkpoint_file(ckpt: &ToyCheckpoint, path: &Path) -> Result<u64> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    write_checkpoint(ckpt, std::io::BufWriter::new(file))
}

pub fn read_checkpoint_file(path: &Path) -> Result<ToyCheckpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
