//! Checkpoint persistence: the frozen best model of a training run together
//! with everything needed to evaluate it later (feature scaling, propagation
//! matrix, seed and the recorded validation loss).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureScaling;
use crate::models::Model;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// The parameter state at the epoch of minimal validation loss.
///
/// Serialized as JSON; `f64` values survive the round trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub model: Model,
    pub scaling: FeatureScaling,
    pub seed: u64,
    pub best_validation_loss: f64,
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<TrainedModel> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let loaded: TrainedModel = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        if loaded.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {})",
                loaded.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(loaded)
    }
}
