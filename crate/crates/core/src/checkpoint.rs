//! Versioned, self-describing checkpoint files.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` JSON header length, the
//! JSON header (kind, dtype and architecture metadata), `u64` value count and
//! the flattened state as little-endian `f64`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"SUBMIACK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("expected a `{expected}` checkpoint, found `{found}`")]
    Kind { expected: String, found: String },
    #[error("state length {found} does not match the architecture ({expected})")]
    StateLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub kind: String,
    pub dtype: String,
    pub checksum: String,
    pub meta: serde_json::Value,
}

pub fn write(path: &Path, header: &Header, state: &[f64]) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(28 + json.len() + state.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(state.len() as u64).to_le_bytes());
    for v in state {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Header, Vec<f64>), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let short = || CheckpointError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let jlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + jlen).ok_or_else(short)?;
    let header: Header = serde_json::from_slice(json)?;
    let at = 20 + jlen;
    let n = u64::from_le_bytes(bytes.get(at..at + 8).ok_or_else(short)?.try_into().unwrap()) as usize;
    let body = bytes.get(at + 8..at + 8 + n * 8).ok_or_else(short)?;
    let state = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let h = Header {
            kind: "classifier".into(),
            dtype: "f32".into(),
            checksum: "abc".into(),
            meta: serde_json::json!({"architecture": "mlp5"}),
        };
        write(&p, &h, &[1.0, -2.5, 3.25]).unwrap();
        let (h2, s) = read(&p).unwrap();
        assert_eq!(h2, h);
        assert_eq!(s, vec![1.0, -2.5, 3.25]);

        std::fs::write(&p, b"garbage-garbage-garbage").unwrap();
        assert!(matches!(read(&p), Err(CheckpointError::BadMagic)));
    }
}
