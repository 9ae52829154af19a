//! Self-describing JSON checkpoints tagged with the `HPLAB1` magic string.

use super::config::ModelConfig;
use super::model::GatedTransformer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gumbel::HeadMask;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "HPLAB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    magic: String,
    version: u32,
    config: ModelConfig,
    /// Original-index keep flags as a bit string.
    architecture: String,
    /// Current gate mask over present heads.
    mask: String,
    params: Vec<NamedArray>,
}

/// A model together with its current head mask.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: GatedTransformer,
    pub mask: HeadMask,
}

impl Checkpoint {
    pub fn new(model: GatedTransformer, mask: HeadMask) -> Result<Self> {
        if mask.len() != model.head_count() {
            return Err(Error::Contract(format!(
                "mask of length {} for {} heads",
                mask.len(),
                model.head_count()
            )));
        }
        Ok(Checkpoint { model, mask })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            architecture: HeadMask::new(self.model.kept_origins()).to_bit_string(),
            mask: self.mask.to_bit_string(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.into_data() })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", file.magic)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", file.version)));
        }
        let kept = HeadMask::from_bit_string(&file.architecture)?;
        let tensors = file
            .params
            .into_iter()
            .map(|a| Ok((a.name, Tensor::new(&a.shape, a.data)?)))
            .collect::<Result<Vec<_>>>()?;
        let model = GatedTransformer::from_named(file.config, kept.bits(), &tensors)?;
        Checkpoint::new(model, HeadMask::from_bit_string(&file.mask)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
