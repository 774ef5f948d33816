//! Checkpoint files: named f64 tensor blocks with a JSON manifest recording
//! each tensor's shape, arbitrary run state, and the config that produced
//! the run. Round-trips are bitwise exact.
//!
//! Layout (little-endian): magic "FBCK", version byte 0x01, u32 manifest
//! length, manifest JSON, then raw tensor data in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0: expected FBCK")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("truncated checkpoint at offset {offset}: {what}")]
    Truncated { offset: u64, what: String },
    #[error("manifest is not valid JSON: {0}")]
    BadManifest(#[from] serde_json::Error),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    extra: serde_json::Value,
    config: serde_json::Value,
}

/// An in-memory checkpoint: named tensors plus JSON state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub extra: serde_json::Value,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(extra: serde_json::Value, config: serde_json::Value) -> Self {
        Checkpoint {
            tensors: Vec::new(),
            extra,
            config,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> CheckpointResult<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn extra_u64(&self, key: &str) -> CheckpointResult<u64> {
        self.extra
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::MissingTensor(format!("extra.{key}")))
    }

    pub fn extra_str(&self, key: &str) -> CheckpointResult<&str> {
        self.extra
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(format!("extra.{key}")))
    }

    pub fn save(&self, path: &Path) -> CheckpointResult<()> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extra: self.extra.clone(),
            config: self.config.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> CheckpointResult<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut offset: u64 = 0;
        let mut take = |r: &mut BufReader<File>, buf: &mut [u8], what: &str| {
            let at = offset;
            r.read_exact(buf).map_err(|_| CheckpointError::Truncated {
                offset: at,
                what: what.to_string(),
            })?;
            offset += buf.len() as u64;
            Ok::<(), CheckpointError>(())
        };

        let mut magic = [0u8; 4];
        take(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut ver = [0u8; 1];
        take(&mut r, &mut ver, "version")?;
        if ver[0] != VERSION {
            return Err(CheckpointError::BadVersion(ver[0]));
        }
        let mut u32buf = [0u8; 4];
        take(&mut r, &mut u32buf, "manifest length")?;
        let mlen = u32::from_le_bytes(u32buf) as usize;
        let mut mbuf = vec![0u8; mlen];
        take(&mut r, &mut mbuf, "manifest")?;
        let manifest: Manifest = serde_json::from_slice(&mbuf)?;

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut f64buf = [0u8; 8];
        for entry in manifest.tensors {
            let numel: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                take(&mut r, &mut f64buf, &entry.name)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            tensors.push((entry.name, Tensor::new(data, entry.shape)));
        }
        Ok(Checkpoint {
            tensors,
            extra: manifest.extra,
            config: manifest.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use tempfile::tempdir;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(
            json!({"step": 123, "rng_main_pos": "456"}),
            json!({"d": 8}),
        );
        c.push("a.w", Tensor::new(vec![1.5, -2.25, 3.125], vec![3]));
        c.push("a.b", Tensor::new(vec![0.1, 0.2, 0.3, 0.4], vec![2, 2]));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.fbck");
        let c = sample();
        c.save(&p).unwrap();
        let l = Checkpoint::load(&p).unwrap();
        assert_eq!(c.tensors.len(), l.tensors.len());
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&l.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        assert_eq!(c.extra, l.extra);
        assert_eq!(c.config, l.config);
        let p2 = dir.path().join("c2.fbck");
        l.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_and_truncation_are_distinct_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.fbck");
        sample().save(&p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[1] = b'!';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(CheckpointError::BadMagic)));

        std::fs::write(&p, &good[..good.len() - 9]).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn missing_tensor_lookup_names_the_tensor() {
        let c = sample();
        let err = c.get("nope.w").unwrap_err();
        assert!(err.to_string().contains("nope.w"));
    }
}
