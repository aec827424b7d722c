//! Checkpoints and their binary file format.
//!
//! Layout: the 8-byte magic `TLDRCKPT`, a little-endian `u32` format version,
//! a `u32` header length, a JSON header (config, metadata, tensor table), then
//! every tensor as little-endian `f32` in traversal order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::Weights;
use crate::seed;

pub const MAGIC: &[u8; 8] = b"TLDRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: Weights,
    /// Free-form training metadata (objective, steps, seed, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    config: ModelConfig,
    adapters: bool,
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Fresh weights from `seed`, rounded to `f32` so the checkpoint round-trips exactly.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::init(&config, &mut seed::rng(seed));
        weights.quantize();
        Ok(Self { config, weights, metadata: BTreeMap::new() })
    }

    /// Fold the adapters in at `alpha_infer`: `Θ + (α_infer/r)·A·B`.
    pub fn merge_lora(&self, alpha_infer: f64) -> Checkpoint {
        let mut weights = self.weights.merged(alpha_infer / self.config.lora_rank as f64);
        weights.quantize();
        let mut metadata = self.metadata.clone();
        metadata.insert("merged_alpha".into(), serde_json::json!(alpha_infer));
        Checkpoint { config: self.config.clone(), weights, metadata }
    }

    /// Merge at the inference ratio `tau = α_infer / α_train`.
    pub fn merge_tau(&self, tau: f64) -> Checkpoint {
        self.merge_lora(tau * self.config.lora_alpha)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        self.weights.for_each(|name, _, t| tensors.push(TensorEntry { name: name.to_string(), shape: [t.nrows(), t.ncols()] }));
        let header = FileHeader {
            config: self.config.clone(),
            adapters: self.weights.has_adapters(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.weights.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        self.weights.for_each(|_, _, t| {
            for &x in t.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        });
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { what: "checkpoint", reason };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"));
        let version = word(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: "checkpoint", expected: CHECKPOINT_VERSION, found: version });
        }
        let header_len = word(12) as usize;
        let body = 16 + header_len;
        if bytes.len() < body {
            return Err(corrupt("truncated header".into()));
        }
        let header: FileHeader = serde_json::from_slice(&bytes[16..body])?;
        header.config.validate()?;

        let mut weights = Weights::init(&header.config, &mut seed::rng(0));
        if !header.adapters {
            weights = weights.merged(0.0);
        }
        let mut expected = Vec::new();
        weights.for_each(|name, _, t| expected.push((name.to_string(), t.dim())));
        if expected.len() != header.tensors.len() {
            return Err(corrupt(format!("{} tensors listed, {} expected", header.tensors.len(), expected.len())));
        }
        for ((name, dim), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name {
                return Err(corrupt(format!("tensor `{}` where `{name}` was expected", entry.name)));
            }
            let found = (entry.shape[0], entry.shape[1]);
            if *dim != found {
                return Err(Error::Shape { name: name.clone(), expected: *dim, found });
            }
        }
        let needed = 4 * weights.parameter_count();
        if bytes.len() - body != needed {
            return Err(corrupt(format!("{} data bytes, {needed} expected", bytes.len() - body)));
        }
        let mut pos = body;
        weights.for_each_mut(|_, _, t| {
            for x in t.iter_mut() {
                *x = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("four bytes")) as f64;
                pos += 4;
            }
        });
        Ok(Checkpoint { config: header.config, weights, metadata: header.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(&self.to_bytes()?)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::Group;

    fn trained_like() -> Checkpoint {
        let mut c = Checkpoint::init(ModelConfig::tiny(), 5).unwrap();
        let mut rng = seed::rng(6);
        c.weights.for_each_mut(|_, _, t| {
            t.mapv_inplace(|x| x + rand::Rng::random_range(&mut rng, -0.5..0.5));
        });
        c.weights.quantize();
        c.metadata.insert("steps".into(), serde_json::json!(12));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = trained_like();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let merged = c.merge_tau(0.5);
        assert_eq!(Checkpoint::from_bytes(&merged.to_bytes().unwrap()).unwrap(), merged);
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = trained_like().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPTxxxxxxxx"), Err(Error::Corrupt { .. })));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn merged_checkpoint_drops_adapters() {
        let c = trained_like();
        let merged = c.merge_lora(0.0);
        assert!(!merged.weights.has_adapters());
        let mut groups = Vec::new();
        merged.weights.for_each(|_, g, _| groups.push(g));
        assert!(!groups.contains(&Group::DecLora) && !groups.contains(&Group::ProjLora));
        assert_eq!(merged.weights.layers[0].wq.w, c.weights.layers[0].wq.w);
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = trained_like();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}
