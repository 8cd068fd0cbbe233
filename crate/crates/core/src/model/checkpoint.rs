//! Checkpoint format: a flat JSON map from parameter path to shape plus
//! row-major values, with enough metadata to rebuild the model and its
//! vocabulary. Values round-trip bit-exactly (serde_json emits the
//! shortest representation that parses back to the same f64).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};

use super::{EncoderConfig, MimoClassifier, TransformerClassifier};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter {0}")]
    UnknownParam(String),
    #[error("parameter {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} contains non-finite values")]
    NonFinite(String),
    #[error("checkpoint kind {0:?} does not match the requested model")]
    KindMismatch(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat parameter map keyed by path, e.g. `blocks.2.attn.wq`.
pub type ParamMap = BTreeMap<String, CheckpointEntry>;

pub fn params_to_map(params: &ParamSet) -> ParamMap {
    params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                CheckpointEntry { shape: p.value.shape.clone(), data: p.value.data.clone() },
            )
        })
        .collect()
}

/// Overwrite every parameter from the map. The map must cover the
/// parameter set exactly.
pub fn restore_params_from_map(params: &mut ParamSet, map: &ParamMap) -> Result<(), CheckpointError> {
    for key in map.keys() {
        if params.id_by_name(key).is_none() {
            return Err(CheckpointError::UnknownParam(key.clone()));
        }
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (name, expected) = {
            let p = params.get(id);
            (p.name.clone(), p.value.shape.clone())
        };
        let entry = map
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
        if entry.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected,
                found: entry.shape.clone(),
            });
        }
        if !entry.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        params.get_mut(id).value = Tensor::new(entry.shape.clone(), entry.data.clone());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Single,
    Mimo,
}

/// A complete saved model: architecture, vocabulary (tokens in id order),
/// and the flat parameter map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    /// MIMO member count; 0 for single models.
    #[serde(default)]
    pub members: usize,
    #[serde(default)]
    pub shared_head: bool,
    pub vocab: Vec<String>,
    pub params: ParamMap,
}

impl Checkpoint {
    pub fn from_single(model: &TransformerClassifier, vocab: Vec<String>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Single,
            encoder: model.config.clone(),
            members: 0,
            shared_head: false,
            vocab,
            params: params_to_map(&model.params),
        }
    }

    pub fn from_mimo(model: &MimoClassifier, shared_head: bool, vocab: Vec<String>) -> Self {
        Checkpoint {
            kind: CheckpointKind::Mimo,
            encoder: model.config.clone(),
            members: model.members,
            shared_head,
            vocab,
            params: params_to_map(&model.params),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        for (name, entry) in &self.params {
            if !entry.data.iter().all(|v| v.is_finite()) {
                return Err(CheckpointError::NonFinite(name.clone()));
            }
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn into_single(&self) -> Result<TransformerClassifier, CheckpointError> {
        if self.kind != CheckpointKind::Single {
            return Err(CheckpointError::KindMismatch(format!("{:?}", self.kind)));
        }
        let mut model = TransformerClassifier::new(self.encoder.clone(), 0);
        restore_params_from_map(&mut model.params, &self.params)?;
        Ok(model)
    }

    pub fn into_mimo(&self) -> Result<MimoClassifier, CheckpointError> {
        if self.kind != CheckpointKind::Mimo {
            return Err(CheckpointError::KindMismatch(format!("{:?}", self.kind)));
        }
        let mut model =
            MimoClassifier::with_shared_head(self.encoder.clone(), self.members, self.shared_head, 0);
        restore_params_from_map(&mut model.params, &self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, CLS_ID};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            max_seq_len: 8,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            num_blocks: 2,
            dropout_rate: 0.0,
            num_classes: 2,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = TransformerClassifier::new(tiny_config(), 42);
        let vocab: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let ckpt = Checkpoint::from_single(&model, vocab);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let restored = loaded.into_single().unwrap();

        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape, b.value.shape);
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {} not bit-exact", a.name);
            }
        }
        // restored model computes identically
        let tokens = vec![CLS_ID, 5, 9];
        assert_eq!(model.forward(&tokens).probs, restored.forward(&tokens).probs);
    }

    #[test]
    fn restore_rejects_shape_mismatch_and_unknown() {
        let model = TransformerClassifier::new(tiny_config(), 1);
        let mut map = params_to_map(&model.params);
        map.get_mut("head.b").unwrap().shape = vec![3];
        let mut target = TransformerClassifier::new(tiny_config(), 2);
        assert!(matches!(
            restore_params_from_map(&mut target.params, &map),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        let mut map = params_to_map(&model.params);
        map.insert("bogus".into(), CheckpointEntry { shape: vec![1], data: vec![0.0] });
        assert!(matches!(
            restore_params_from_map(&mut target.params, &map),
            Err(CheckpointError::UnknownParam(_))
        ));

        let mut map = params_to_map(&model.params);
        map.remove("head.b");
        assert!(matches!(
            restore_params_from_map(&mut target.params, &map),
            Err(CheckpointError::MissingParam(_))
        ));
    }

    #[test]
    fn mimo_checkpoint_roundtrip() {
        let mimo = MimoClassifier::new(tiny_config(), 2, 9);
        let vocab: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let ckpt = Checkpoint::from_mimo(&mimo, false, vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mimo.json");
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().into_mimo().unwrap();
        let tokens = vec![CLS_ID, 4, 7];
        let (_, a) = mimo.predict(&tokens);
        let (_, b) = restored.predict(&tokens);
        assert_eq!(a.probs, b.probs);
    }
}
