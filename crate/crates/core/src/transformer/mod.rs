//! Toy Transformers with one gate variable per attention head.

mod attention;
mod checkpoint;
mod config;
mod model;

pub use attention::{
    attention_head_forward, causal_mask, gated_multihead_forward, head_forward, HeadNodes, HeadWeights,
    MASKED_LOGIT,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AttentionKind, ModelConfig, TaskKind};
pub use model::{
    AttentionSublayer, Batch, Bound, ClassifyBatch, GatedTransformer, GatedView, Gates, HeadParams, HeadSlot,
    ParamId, Seq2seqBatch,
};

use crate::error::Result;
use crate::gumbel::HeadMask;

/// Fixed-gate view of `model`; see [`GatedTransformer::with_gates`].
pub fn apply_gates<'a>(model: &'a GatedTransformer, gates: &[f64]) -> Result<GatedView<'a>> {
    model.with_gates(gates)
}

pub fn compact(model: &GatedTransformer, mask: &HeadMask) -> Result<GatedTransformer> {
    model.compact(mask)
}
