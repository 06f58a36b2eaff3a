//! Raw little-endian tensor files with a JSON sidecar.
//!
//! A tensor `name.bin` holds `n * d` row-major values; `name.json` carries the
//! shape plus identity metadata. Feature bags and knowledge-base banks use
//! 32-bit floats. Checkpoints reuse the layout with `"dtype": "f64"` so that
//! parameters round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn is_f32(&self) -> bool {
        *self == Dtype::F32
    }
}

/// Shape descriptor stored next to every binary tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub slide_id: String,
    pub n: usize,
    pub d: usize,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Dtype::is_f32")]
    pub dtype: Dtype,
}

impl Sidecar {
    pub fn byte_len(&self) -> usize {
        self.n * self.d * self.dtype.width()
    }
}

/// `foo.bin` → `foo.json`
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    read_json(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = fs::read(path).map_err(|e| MuseError::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| MuseError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut raw = serde_json::to_vec_pretty(value).map_err(|e| MuseError::json(path, e))?;
    raw.push(b'\n');
    write_bytes(path, &raw)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| MuseError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| MuseError::io(path, e))
}

fn read_exact_len(path: &Path, sidecar: &Sidecar) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| MuseError::io(path, e))?;
    if bytes.len() != sidecar.byte_len() {
        return Err(MuseError::format(
            path,
            format!(
                "expected {} bytes for {}x{} {:?}, found {}",
                sidecar.byte_len(),
                sidecar.n,
                sidecar.d,
                sidecar.dtype,
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

/// Reads an f32 tensor, rejecting size mismatches and non-finite values.
pub fn read_f32(path: &Path, sidecar: &Sidecar) -> Result<Array2<f32>> {
    if sidecar.dtype != Dtype::F32 {
        return Err(MuseError::format(path, "expected f32 tensor"));
    }
    let bytes = read_exact_len(path, sidecar)?;
    let values: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(MuseError::data(format!("{}: non-finite value at flat index {pos}", path.display())));
    }
    Array2::from_shape_vec((sidecar.n, sidecar.d), values).map_err(|e| MuseError::format(path, e.to_string()))
}

pub fn write_f32(path: &Path, data: &Array2<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_f64(path: &Path, sidecar: &Sidecar) -> Result<Array2<f64>> {
    if sidecar.dtype != Dtype::F64 {
        return Err(MuseError::format(path, "expected f64 tensor"));
    }
    let bytes = read_exact_len(path, sidecar)?;
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MuseError::data(format!("{}: non-finite value", path.display())));
    }
    Array2::from_shape_vec((sidecar.n, sidecar.d), values).map_err(|e| MuseError::format(path, e.to_string()))
}

pub fn write_f64(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let m = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 + 1.0) / (j as f64 + 3.0));
        write_f64(&path, &m).unwrap();
        let side = Sidecar { slide_id: "w".into(), n: 3, d: 5, label: 0, dtype: Dtype::F64 };
        assert_eq!(read_f64(&path, &side).unwrap(), m);
        assert!(read_f32(&path, &side).is_err());
    }

    #[test]
    fn sidecar_omits_default_dtype() {
        let side = Sidecar { slide_id: "a".into(), n: 1, d: 2, label: 0, dtype: Dtype::F32 };
        let json = serde_json::to_string(&side).unwrap();
        assert_eq!(json, r#"{"slide_id":"a","n":1,"d":2,"label":0}"#);
    }
}
