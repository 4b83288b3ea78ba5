//! Parameter checkpoints: an 8-byte magic, a little-endian `u32` header length, a JSON
//! header, then the flat parameter vector as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

pub const MAGIC: &[u8; 8] = b"FGSCCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// What the parameters belong to, e.g. `denoiser`, `policy`, `critic`.
    pub kind: String,
    /// Layer widths of the network, input first.
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub n_params: usize,
    pub seed: u64,
    /// Kind-specific metadata.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    if header.n_params != params.len() {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters but {} were given",
            header.n_params,
            params.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for &p in params {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != header.n_params * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 4,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_length_json_then_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let header = CheckpointHeader {
            format_version: 1,
            kind: "test".into(),
            layers: vec![1, 1],
            activation: Activation::Tanh,
            n_params: 2,
            seed: 9,
            extra: serde_json::json!({"note": "x"}),
        };
        write_checkpoint(&path, &header, &[1.5, -0.25]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let tail = &bytes[12 + hlen..];
        assert_eq!(tail, [1.5f32.to_le_bytes(), (-0.25f32).to_le_bytes()].concat().as_slice());
        let (h, p) = read_checkpoint(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(p, vec![1.5, -0.25]);
    }

    #[test]
    fn missing_and_truncated_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.ckpt");
        assert!(matches!(read_checkpoint(&path), Err(Error::MissingCheckpoint(_))));
        std::fs::write(&path, b"FGSCCKPT\x02\x00\x00\x00{}").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
