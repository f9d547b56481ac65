//! Parameter checkpoints: `manifest.json` plus a little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub module: String,
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors in a fixed order, plus identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub module: String,
    pub step: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(module: impl Into<String>, step: u64, meta: serde_json::Value) -> Self {
        Checkpoint {
            module: module.into(),
            step,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn push_all<'a>(&mut self, prefix: &str, ts: impl IntoIterator<Item = &'a Tensor>) {
        for (i, t) in ts.into_iter().enumerate() {
            self.push(format!("{prefix}.{i}"), t);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            module: self.module.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape(),
                })
                .collect(),
        };
        let mpath = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            path: mpath.clone(),
            source: e,
        })?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut blob = Vec::with_capacity(total * 8);
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bpath = dir.join(BLOB);
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let bad = |detail: String| Error::Checkpoint {
            path: mpath.clone(),
            detail,
        };
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let bpath = dir.join(BLOB);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let expected: usize = manifest.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
        if blob.len() != expected * 8 {
            return Err(Error::Checkpoint {
                path: bpath,
                detail: format!("blob has {} bytes, manifest needs {}", blob.len(), expected * 8),
            });
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")));
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let [r, c] = entry.shape;
            let data: Vec<f64> = values.by_ref().take(r * c).collect();
            tensors.push((entry.name, Tensor::from_vec(r, c, data)?));
        }
        Ok(Checkpoint {
            module: manifest.module,
            step: manifest.step,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Copy stored tensors, in order, into `dst`, checking shapes.
    pub fn restore_into<'a>(
        &self,
        offset: &mut usize,
        dst: impl IntoIterator<Item = &'a mut Tensor>,
    ) -> Result<()> {
        for t in dst {
            let Some((name, src)) = self.tensors.get(*offset) else {
                return Err(Error::Mismatch(format!(
                    "checkpoint `{}` ran out of tensors at {}",
                    self.module, offset
                )));
            };
            if src.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
            *offset += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("probe", 42, serde_json::json!({"k": 1}));
        ck.push("a", &Tensor::from_vec(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        ck.push("b", &Tensor::zeros(0, 3));
        ck.push("c", &Tensor::scalar(std::f64::consts::PI));
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new("probe", 0, serde_json::Value::Null);
        ck.push("a", &Tensor::zeros(3, 3));
        ck.save(dir.path()).unwrap();
        let p = dir.path().join(BLOB);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
