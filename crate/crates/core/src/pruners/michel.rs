use super::common::{ImportanceScores, ScoreSource};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gumbel::{top_k_indices, HeadMask};
use crate::transformer::{Batch, GatedTransformer, Gates};

/// Gradient-proxy importance: the mean over examples of `|dL_m / dg_h|`,
/// taken at the gate values of `mask` (all ones for an unpruned model).
///
/// Each example gets its own gate row so per-example gradients come out of
/// a single backward pass per batch.
pub fn michel_importance(model: &GatedTransformer, mask: &HeadMask, data: &[Batch]) -> Result<ImportanceScores> {
    let h = model.head_count();
    if mask.len() != h {
        return Err(Error::Contract(format!("mask of length {} for {h} heads", mask.len())));
    }
    let mut total = vec![0.0; h];
    let mut examples = 0usize;
    for batch in data {
        let b = batch.size();
        if b == 0 {
            continue;
        }
        let row = mask.as_gates();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false)?;
        let g = tape.param(Tensor::new(&[b, h], row.repeat(b))?)?;
        let loss = model.loss(&mut tape, &p, Gates::Node(g), batch)?;
        tape.backward(loss)?;
        // The loss averages over examples, so each row's gradient is dL_m/dg / b.
        if let Some(grad) = tape.grad(g) {
            for m in 0..b {
                for (acc, v) in total.iter_mut().zip(&grad[m * h..(m + 1) * h]) {
                    *acc += (v * b as f64).abs();
                }
            }
        }
        examples += b;
    }
    if examples == 0 {
        return Err(Error::Domain("importance needs at least one example".into()));
    }
    for v in &mut total {
        *v /= examples as f64;
    }
    ImportanceScores::new(total, ScoreSource::GradientProxy)
}

/// Default number of heads removed between score recomputations.
pub fn default_block(h: usize) -> usize {
    (h / 10).max(1)
}

/// Greedy pruning down to `target` heads, removing the `block` lowest-scored
/// surviving heads at a time and re-scoring in between. Returns the mask
/// after every block, ending with exactly `target` heads.
pub fn greedy_pipeline_prune(
    model: &GatedTransformer,
    data: &[Batch],
    block: usize,
    target: usize,
) -> Result<Vec<HeadMask>> {
    let h = model.head_count();
    if block < 1 {
        return Err(Error::Domain("block size must be at least 1".into()));
    }
    if target > h {
        return Err(Error::Domain(format!("target {target} exceeds {h} heads")));
    }
    let mut mask = HeadMask::all(h);
    let mut masks = Vec::new();
    while mask.count() > target {
        let scores = michel_importance(model, &mask, data)?;
        let remove = block.min(mask.count() - target);
        for head in lowest_kept(&scores.scores, &mask, remove) {
            mask.set(head, false);
        }
        masks.push(mask.clone());
    }
    Ok(masks)
}

/// The `n` kept heads with the smallest scores; ties drop the highest index
/// first so that the lowest index survives.
fn lowest_kept(scores: &[f64], mask: &HeadMask, n: usize) -> Vec<usize> {
    let kept = mask.kept();
    let values: Vec<f64> = kept.iter().map(|&i| -scores[i]).collect();
    // Negated scores: the largest are the weakest heads. Reverse index order
    // so ties pick the later head.
    let rev: Vec<f64> = values.iter().rev().cloned().collect();
    top_k_indices(&rev, n).into_iter().map(|j| kept[kept.len() - 1 - j]).collect()
}

/// Michel pruning to exactly `k` heads.
pub fn michel_prune(model: &GatedTransformer, data: &[Batch], block: usize, k: usize) -> Result<(HeadMask, Vec<f64>)> {
    let h = model.head_count();
    if k < 1 || k > h {
        return Err(Error::Domain(format!("K = {k} outside [1, {h}]")));
    }
    let masks = greedy_pipeline_prune(model, data, block, k)?;
    let full = michel_importance(model, &HeadMask::all(h), data)?;
    Ok((masks.last().cloned().unwrap_or_else(|| HeadMask::all(h)), full.scores))
}
