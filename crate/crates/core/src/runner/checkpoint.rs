use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balancer::RelativeSizes;
use crate::error::{Error, Result};
use crate::metrics::{EpochAccumulator, EpochStats};
use crate::model::{ModelPair, Sgd};
use crate::tensor::{Precision, Real};

use super::config::ExperimentConfig;

pub const CHECKPOINT_FORMAT: &str = "clusterbal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete training state. JSON floats are written in shortest round-trip
/// form, so loading restores every value bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub precision: Precision,
    pub config: ExperimentConfig,
    pub step: u64,
    pub models: ModelPair<T>,
    pub optimizer: Sgd<T>,
    pub relative_sizes: RelativeSizes,
    pub accumulator: EpochAccumulator,
    pub history: Vec<EpochStats>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    precision: Precision,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(
        config: ExperimentConfig,
        step: u64,
        models: ModelPair<T>,
        optimizer: Sgd<T>,
        relative_sizes: RelativeSizes,
        accumulator: EpochAccumulator,
        history: Vec<EpochStats>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            precision: T::PRECISION,
            config,
            step,
            models,
            optimizer,
            relative_sizes,
            accumulator,
            history,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let precision = peek_precision(text)?;
        if precision != T::PRECISION {
            return Err(Error::State(format!(
                "checkpoint stores {precision:?} values, expected {:?}",
                T::PRECISION
            )));
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Reads and checks the format header, returning the stored precision.
pub fn peek_precision(text: &str) -> Result<Precision> {
    let header: Header = serde_json::from_str(text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::State(format!(
            "not a checkpoint (format {:?})",
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::State(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    Ok(header.precision)
}
