//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, the manifest length as a little-endian `u32`,
//! the JSON manifest, then every tensor as raw little-endian `f32` in
//! manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SENSOR, VIDEO};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PTGNNCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: ModelConfig,
    /// Set once the sensor branch has been removed.
    pub stripped: bool,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub stripped: bool,
}

/// Parameter counts and bytes before and after [`Checkpoint::strip`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripReport {
    pub params_before: usize,
    pub params_after: usize,
    pub bytes_before: usize,
    pub bytes_after: usize,
    pub tensors_removed: usize,
    /// The input had no sensor branch; nothing changed.
    pub already_stripped: bool,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, store: ParamStore<f32>) -> Self {
        let stripped = !store.names().any(|n| n.starts_with(&format!("{SENSOR}.")));
        Checkpoint { config, store, stripped }
    }

    /// Stored scalars, buffers included.
    pub fn params(&self) -> usize {
        self.store.total_scalars()
    }

    pub fn param_bytes(&self) -> usize {
        self.params() * 4
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .store
            .iter()
            .map(|(name, e)| {
                let rec = TensorRecord {
                    name: name.clone(),
                    shape: e.value.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    trainable: e.trainable,
                };
                offset += e.value.len() * 4;
                rec
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config_hash: config_hash(&self.config),
            config: self.config.clone(),
            stripped: self.stripped,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let len = u32::try_from(manifest.len()).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
        let mut out = Vec::with_capacity(12 + manifest.len() + self.param_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, e) in self.store.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.config_hash != config_hash(&manifest.config) {
            return Err(bad("config hash does not match the stored config"));
        }
        let payload = &bytes[12 + len..];
        let mut store = ParamStore::new();
        let mut expected = 0;
        for t in &manifest.tensors {
            if store.contains(&t.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
            }
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", t.name, t.dtype)));
            }
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("tensor `{}` has offset {} (expected {expected})", t.name, t.offset)));
            }
            let n: usize = t.shape.iter().product();
            let raw = payload.get(t.offset..t.offset + n * 4).ok_or_else(|| Error::Checkpoint(format!("payload truncated at `{}`", t.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.trainable);
            expected += n * 4;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!("{} trailing payload bytes", payload.len() - expected)));
        }
        manifest.config.validate()?;
        if !store.names().any(|n| n.starts_with(&format!("{VIDEO}."))) {
            return Err(bad("no video weights"));
        }
        Ok(Checkpoint { config: manifest.config, store, stripped: manifest.stripped })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Removes the sensor branch, keeping what video-only inference reads.
    pub fn strip(&mut self) -> StripReport {
        let (params_before, bytes_before) = (self.params(), self.param_bytes());
        let removed = self.store.remove_prefix(&format!("{SENSOR}."));
        let already_stripped = self.stripped && removed == 0;
        self.stripped = true;
        StripReport {
            params_before,
            params_after: self.params(),
            bytes_before,
            bytes_after: self.param_bytes(),
            tensors_removed: removed,
            already_stripped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{infer_level, init_model};
    use crate::model::tests::tiny_config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> Checkpoint {
        let cfg = tiny_config();
        let store = init_model::<f32>(&cfg, 3).unwrap();
        Checkpoint::new(cfg, store)
    }

    fn clip(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.video.segments * cfg.video.feature_dim;
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new([1, cfg.video.segments, cfg.video.feature_dim], data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = tiny();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let x = clip(&ck.config, 1);
        let a = infer_level(&ck.store, &ck.config, None, &x).unwrap();
        let b = infer_level(&back.store, &back.config, None, &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn strip_keeps_logits_and_is_idempotent() {
        let full = tiny();
        let mut stripped = full.clone();
        let report = stripped.strip();
        assert!(report.bytes_after < report.bytes_before && report.tensors_removed > 0);
        assert!(!report.already_stripped);
        for s in 0..10 {
            let x = clip(&full.config, s);
            let a = infer_level(&full.store, &full.config, None, &x).unwrap();
            let b = infer_level(&stripped.store, &stripped.config, None, &x).unwrap();
            assert_eq!(a.data(), b.data());
        }
        let bytes = stripped.to_bytes().unwrap();
        let again = stripped.strip();
        assert!(again.already_stripped);
        assert_eq!(again.bytes_before, again.bytes_after);
        assert_eq!(stripped.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"garbage!garbage!"), Err(Error::Checkpoint(_))));

        let mut m = tiny().manifest();
        m.format_version = 99;
        let mut forged = tiny().to_bytes().unwrap();
        let len = u32::from_le_bytes(forged[8..12].try_into().unwrap()) as usize;
        let body = serde_json::to_vec(&m).unwrap();
        forged.splice(8..12 + len, (body.len() as u32).to_le_bytes().into_iter().chain(body));
        let err = Checkpoint::from_bytes(&forged).unwrap_err().to_string();
        assert!(err.contains("format version 99"), "{err}");
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let ck = tiny();
        let mut m = ck.manifest();
        let first = m.tensors[0].clone();
        m.tensors[1] = TensorRecord { offset: m.tensors[1].offset, ..first };
        let mut bytes = MAGIC.to_vec();
        let body = serde_json::to_vec(&m).unwrap();
        bytes.extend((body.len() as u32).to_le_bytes());
        bytes.extend(body);
        bytes.extend(&ck.to_bytes().unwrap()[12 + serde_json::to_vec(&ck.manifest()).unwrap().len()..]);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("duplicate") || err.contains("offset"), "{err}");
    }

    #[test]
    fn missing_video_weights_fail_inference() {
        let mut ck = tiny();
        ck.store.remove_prefix("video.cls");
        let x = clip(&ck.config, 0);
        assert!(matches!(infer_level(&ck.store, &ck.config, None, &x), Err(Error::Checkpoint(_))));
    }
}
