//! Self-describing JSON checkpoint: config, normalization statistics,
//! calibration scores and every parameter tensor with its shape.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::series::Normalizer;
use crate::tensor::Tensor;

pub const FORMAT: &str = "dmamba-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    seed: Option<u64>,
    #[serde(default)]
    feature_names: Vec<String>,
    config: ModelConfig,
    normalizer: Normalizer,
    calibration_scores: Vec<f64>,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub seed: Option<u64>,
    /// Input column names in model feature order; empty when unknown.
    pub feature_names: Vec<String>,
    /// Scores of the training series under the trained model, used to fit
    /// the alarm threshold.
    pub calibration_scores: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: self.seed,
            feature_names: self.feature_names.clone(),
            config: self.state.config.clone(),
            normalizer: self.state.normalizer.clone(),
            calibration_scores: self.calibration_scores.clone(),
            tensors: self
                .state
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag `{}`", doc.format)));
        }
        if doc.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {VERSION})",
                doc.version
            )));
        }
        // Shapes come from the config; values are overwritten below.
        let mut state = ModelState::init(doc.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if doc.normalizer.mean.len() != state.config.features || doc.normalizer.std.len() != state.config.features {
            return Err(Error::Checkpoint("normalizer length does not match features".into()));
        }
        if !doc.feature_names.is_empty() && doc.feature_names.len() != state.config.features {
            return Err(Error::Checkpoint("feature name count does not match features".into()));
        }
        state.normalizer = doc.normalizer;
        let mut slots = state.tensors_mut();
        if slots.len() != doc.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                doc.tensors.len()
            )));
        }
        for ((name, slot), stored) in slots.iter_mut().zip(doc.tensors) {
            if *name != stored.name {
                return Err(Error::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    stored.name
                )));
            }
            if slot.shape() != stored.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            **slot = Tensor::new(stored.shape, stored.data)?;
        }
        Ok(Self {
            state,
            seed: doc.seed,
            feature_names: doc.feature_names,
            calibration_scores: doc.calibration_scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            window: 12,
            features: 3,
            d_model: 4,
            n_state: 2,
            blocks: 2,
            ..ModelConfig::default()
        };
        let mut state = ModelState::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        state.normalizer = Normalizer {
            mean: vec![0.1, -2.0, 1e-17],
            std: vec![1.0 / 3.0, 2.5, 7.0],
        };
        Checkpoint {
            state,
            seed: Some(9),
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            calibration_scores: vec![0.0, 0.1 + 0.2, 1e-300],
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        for ((_, a), (_, b)) in ck.state.tensors().iter().zip(back.state.tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = sample().to_json().unwrap().replace("\"version\":1", "\"version\":99");
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = sample().to_json().unwrap().replacen('{', "{\"extra\":1,", 1);
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
