//! Binary container for checkpoints and embedding stores, raw matrix
//! files with shape sidecars, and config fingerprinting.
//!
//! Container layout: 4 magic bytes, u32 format version, length-prefixed
//! JSON meta block, u32 record count, then length-prefixed
//! `(path, shape, f64 little-endian payload)` records. Round-trips are
//! bit-exact.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GMMF";
pub const STORE_MAGIC: [u8; 4] = *b"GMMS";
pub const CONTAINER_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_container(
    path: &Path,
    magic: &[u8; 4],
    meta: &serde_json::Value,
    records: &[(&str, &Tensor)],
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(magic)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;

    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;

    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (record_path, tensor) in records {
        let path_bytes = record_path.as_bytes();
        w.write_all(&(path_bytes.len() as u16).to_le_bytes())?;
        w.write_all(path_bytes)?;
        w.write_all(&(tensor.shape().len() as u8).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(
    path: &Path,
    expected_magic: &[u8; 4],
) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected_magic {
        return Err(format_err(
            path,
            format!("bad magic {magic:?}, expected {expected_magic:?}"),
        ));
    }
    let version = read_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }

    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let path_len = read_u16(&mut r)? as usize;
        let mut path_bytes = vec![0u8; path_len];
        r.read_exact(&mut path_bytes)?;
        let record_path = String::from_utf8(path_bytes)
            .map_err(|_| format_err(path, "record path is not UTF-8"))?;

        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push((record_path, Tensor::from_shape_vec(shape, data)?));
    }
    Ok((meta, records))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[derive(Serialize, Deserialize)]
struct ShapeSidecar {
    rows: usize,
    cols: usize,
}

/// Writes `<base>.f64le` plus a `<base>.shape.json` sidecar.
pub fn write_matrix(base: &Path, tensor: &Tensor) -> Result<()> {
    let (rows, cols) = tensor.dims2()?;
    let mut bytes = Vec::with_capacity(tensor.numel() * 8);
    for &v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(base.with_extension("f64le"), bytes)?;
    fs::write(
        base.with_extension("shape.json"),
        serde_json::to_string(&ShapeSidecar { rows, cols })?,
    )?;
    Ok(())
}

pub fn read_matrix(base: &Path) -> Result<Tensor> {
    let data_path = base.with_extension("f64le");
    let sidecar: ShapeSidecar =
        serde_json::from_str(&fs::read_to_string(base.with_extension("shape.json"))?)?;
    let bytes = fs::read(&data_path)?;
    if bytes.len() != sidecar.rows * sidecar.cols * 8 {
        return Err(format_err(
            &data_path,
            format!(
                "payload is {} bytes, shape {}x{} needs {}",
                bytes.len(),
                sidecar.rows,
                sidecar.cols,
                sidecar.rows * sidecar.cols * 8
            ),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::matrix(sidecar.rows, sidecar.cols, data)
}

/// SHA-256 over the compact canonical JSON encoding (serde_json keeps
/// object keys sorted), so identical configs share a fingerprint.
pub fn config_fingerprint(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("JSON value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let a = Tensor::matrix(2, 3, vec![1.0, -2.5, 3e-7, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap();
        let b = Tensor::scalar(42.0);
        let meta = serde_json::json!({"epoch": 3, "tag": "x"});
        write_container(&path, &CHECKPOINT_MAGIC, &meta, &[("a.w", &a), ("b", &b)]).unwrap();

        let (meta2, records) = read_container(&path, &CHECKPOINT_MAGIC).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].0, "a.w");
        assert_eq!(records[0].1, a);
        assert_eq!(records[1].1, b);

        // Same content written twice gives identical bytes.
        let path2 = dir.path().join("test2.ckpt");
        write_container(&path2, &CHECKPOINT_MAGIC, &meta, &[("a.w", &a), ("b", &b)]).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn container_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let t = Tensor::scalar(1.0);
        write_container(&path, &STORE_MAGIC, &serde_json::json!({}), &[("t", &t)]).unwrap();
        assert!(read_container(&path, &CHECKPOINT_MAGIC).is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("m0001");
        let t = Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        write_matrix(&base, &t).unwrap();
        assert_eq!(read_matrix(&base).unwrap(), t);
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":2}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":2,"x":1}"#).unwrap();
        assert_eq!(config_fingerprint(&a), config_fingerprint(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":3}"#).unwrap();
        assert_ne!(config_fingerprint(&a), config_fingerprint(&c));
    }
}
