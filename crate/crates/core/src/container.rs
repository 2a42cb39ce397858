// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary activation container ("RSAF").
//!
//! Layout, all little-endian:
//!
//! | bytes | field                     |
//! |-------|---------------------------|
//! | 4     | magic `RSAF`              |
//! | 4     | version, `u32` = 1        |
//! | 4     | `n_rows`, `u32`           |
//! | 4     | `dim`, `u32`              |
//! | 4     | dtype tag, `u32` (1 = f32)|
//! | 4·n·d | row-major `f32` payload   |
//!
//! A JSON sidecar at `<path>.json` carries labels/metadata and the SHA-256 of
//! the binary file, which is verified on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSAF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 20;

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub n_rows: u32,
    pub dim: u32,
    pub dtype: String,
    pub sha256: String,
    pub meta: serde_json::Value,
}

/// A loaded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub n_rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `bytes` to a temporary sibling and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode(n_rows: usize, dim: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != n_rows * dim {
        return Err(Error::Container(format!(
            "payload of {} values for {n_rows}x{dim}",
            data.len()
        )));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Container(format!("{what} {v} exceeds u32")))
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&to_u32(n_rows, "n_rows")?.to_le_bytes());
    bytes.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(Error::Container(format!("unsupported version {}", word(4))));
    }
    let (n_rows, dim) = (word(8) as usize, word(12) as usize);
    if word(16) != DTYPE_F32 {
        return Err(Error::Container(format!(
            "unsupported dtype tag {}",
            word(16)
        )));
    }
    let expected = n_rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Container("size overflow".into()))?;
    if bytes.len() - HEADER_LEN != expected {
        return Err(Error::Container(format!(
            "payload is {} bytes, header says {expected}",
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((n_rows, dim, data))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write a container and its sidecar. Returns the content hash.
pub fn write(
    path: &Path,
    n_rows: usize,
    dim: usize,
    data: &[f32],
    meta: serde_json::Value,
) -> Result<String> {
    let bytes = encode(n_rows, dim, data)?;
    let sha256 = sha256_hex(&bytes);
    let sidecar = Sidecar {
        format: "RSAF".into(),
        version: VERSION,
        n_rows: n_rows as u32,
        dim: dim as u32,
        dtype: "f32".into(),
        sha256: sha256.clone(),
        meta,
    };
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(sha256)
}

/// Read and verify a container.
pub fn read(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let actual = sha256_hex(&bytes);
    if actual != sidecar.sha256 {
        return Err(Error::Container(format!(
            "hash mismatch for {}: sidecar {}, file {actual}",
            path.display(),
            sidecar.sha256
        )));
    }
    let (n_rows, dim, data) = decode(&bytes)?;
    if (n_rows as u32, dim as u32) != (sidecar.n_rows, sidecar.dim) {
        return Err(Error::Container(
            "sidecar shape disagrees with header".into(),
        ));
    }
    Ok(Container {
        n_rows,
        dim,
        data,
        meta: sidecar.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let b = encode(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(&b[..4], b"RSAF");
        assert_eq!(b.len(), 20 + 24);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.0);
        assert!(encode(2, 3, &[0.0; 5]).is_err());
    }

    #[test]
    fn corrupted_file_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rsaf");
        write(&p, 1, 2, &[1.0, 2.0], serde_json::json!({"layer": 3})).unwrap();
        assert_eq!(read(&p).unwrap().meta["layer"], 3);
        let mut bytes = fs::read(&p).unwrap();
        bytes[21] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read(&p), Err(Error::Container(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let b = encode(2, 2, &[0.0; 4]).unwrap();
        assert!(decode(&b[..b.len() - 4]).is_err());
        assert!(decode(b"NOPE").is_err());
    }
}
