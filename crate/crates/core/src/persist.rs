//! Model checkpoints with the metadata needed to rebuild and validate them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeSchema, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::training::TrainConfig;

pub const MODEL_FORMAT: &str = "fpdg-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub vocab_fingerprint: String,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

impl ModelMeta {
    pub fn new(model: &ModelConfig, vocab: &Vocab, schema: &AttributeSchema) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            model: model.clone(),
            train: None,
            vocab_fingerprint: vocab.fingerprint(),
            categories: schema.categories().to_vec(),
            epoch: None,
            val_loss: None,
        }
    }

    /// Fails unless `vocab` and `schema` are the ones the model was trained with.
    pub fn check_compatible(&self, vocab: &Vocab, schema: &AttributeSchema) -> Result<()> {
        if self.vocab_fingerprint != vocab.fingerprint() {
            return Err(Error::VocabMismatch(format!(
                "checkpoint expects vocabulary {}, got {}",
                self.vocab_fingerprint,
                vocab.fingerprint()
            )));
        }
        if self.categories != schema.categories() {
            return Err(Error::VocabMismatch("checkpoint and schema disagree on the label set".into()));
        }
        Ok(())
    }
}

/// Writes atomically; parameters are stored as f32.
pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>, meta: &ModelMeta) -> Result<()> {
    if meta.model != model.config {
        return Err(Error::Checkpoint("metadata describes a different model configuration".into()));
    }
    let ckpt = Checkpoint::from_store(serde_json::to_value(meta)?, &model.params);
    write_checkpoint(path, &ckpt)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, ModelMeta)> {
    let ckpt = read_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ckpt.metadata.clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
    if meta.format != MODEL_FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format `{}`", meta.format)));
    }
    let mut model = Model::new(meta.model.clone(), 0)?;
    ckpt.apply_to(&mut model.params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_schema, generate_corpus};
    use crate::model::Variant;

    #[test]
    fn round_trip_keeps_variant_and_values() {
        let schema = default_schema();
        let corpus = generate_corpus(&schema, 5, 1).unwrap();
        let vocab = Vocab::build(&corpus).unwrap();
        let cfg = TrainConfig {
            dim: 8,
            variant: Variant::parse("no_elstm").unwrap(),
            ..TrainConfig::desk()
        };
        let model: Model<f32> = Model::new(cfg.model_config(&vocab, &schema), 9).unwrap();
        let mut meta = ModelMeta::new(&model.config, &vocab, &schema);
        meta.train = Some(cfg.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&path, &model, &meta).unwrap();

        let (back, meta_back) = load_model::<f32>(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.config.variant, cfg.variant);
        for ((_, n, a), (_, m, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!((n, a.data()), (m, b.data()));
        }
        meta_back.check_compatible(&vocab, &schema).unwrap();
        let other = Vocab::build(&generate_corpus(&schema, 5, 2).unwrap()).unwrap();
        assert!(matches!(meta_back.check_compatible(&other, &schema), Err(Error::VocabMismatch(_))));

        let mut wrong = meta.clone();
        wrong.model.dim = 16;
        assert!(save_model(&path, &model, &wrong).is_err());
    }
}
