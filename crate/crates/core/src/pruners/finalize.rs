use super::common::{train_fixed, Method, PruningOutcome, StepRecord, TrainSettings};
use crate::error::{Error, Result};
use crate::gumbel::{hard_top_k, top_k_indices, HeadMask};
use crate::transformer::{Batch, GatedTransformer};

/// Smallest change to `mask` that leaves exactly `k` heads: re-include the
/// pruned heads with the highest gate values, or drop the kept heads with
/// the lowest. Ties go to the lowest index in both directions.
pub fn adjust_mask_to_k(gates: &[f64], mask: &HeadMask, k: usize) -> Result<HeadMask> {
    let h = gates.len();
    if mask.len() != h {
        return Err(Error::Contract(format!("{} gate values for a mask of {} heads", h, mask.len())));
    }
    if k > h {
        return Err(Error::Domain(format!("K = {k} exceeds {h} heads")));
    }
    let mut out = mask.clone();
    let kept = mask.count();
    if kept < k {
        let pruned: Vec<usize> = (0..h).filter(|&i| !mask.is_kept(i)).collect();
        let vals: Vec<f64> = pruned.iter().map(|&i| gates[i]).collect();
        for j in top_k_indices(&vals, k - kept) {
            out.set(pruned[j], true);
        }
    } else if kept > k {
        let kept_idx = mask.kept();
        let vals: Vec<f64> = kept_idx.iter().map(|&i| gates[i]).collect();
        // Drop the smallest; among equal values the lowest index survives.
        let mut order: Vec<usize> = (0..kept_idx.len()).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(b.cmp(&a)));
        for &j in order.iter().take(kept - k) {
            out.set(kept_idx[j], false);
        }
    }
    Ok(out)
}

/// Fixes the noise-free top-K of `scores` as the mask, evaluates, fine-tunes
/// with that mask for `settings.steps` steps and evaluates again.
pub fn finalize_and_finetune(
    model: &mut GatedTransformer,
    method: Method,
    scores: &[f64],
    k: usize,
    data: &[Batch],
    settings: &TrainSettings,
    evaluate: &dyn Fn(&GatedTransformer, &HeadMask) -> Result<f64>,
) -> Result<PruningOutcome> {
    let mask = hard_top_k(scores, k)?;
    finetune_mask(model, method, mask, scores.to_vec(), data, settings, evaluate)
}

/// As [`finalize_and_finetune`] for an already chosen mask.
pub fn finetune_mask(
    model: &mut GatedTransformer,
    method: Method,
    mask: HeadMask,
    scores: Vec<f64>,
    data: &[Batch],
    settings: &TrainSettings,
    evaluate: &dyn Fn(&GatedTransformer, &HeadMask) -> Result<f64>,
) -> Result<PruningOutcome> {
    let pre = evaluate(model, &mask)?;
    let history: Vec<StepRecord> = if settings.steps > 0 {
        train_fixed(model, Some(&mask), data, settings)?
    } else {
        Vec::new()
    };
    let post = if settings.steps > 0 { evaluate(model, &mask)? } else { pre };
    Ok(PruningOutcome {
        method,
        k: mask.count(),
        mask,
        history,
        metric_pre: Some(pre),
        metric_post: Some(post),
        scores,
        raw_kept: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kept(m: &HeadMask) -> Vec<usize> {
        m.kept()
    }

    #[test]
    fn adjust_is_noop_at_target() {
        let m = HeadMask::new(vec![true, false, true]);
        assert_eq!(adjust_mask_to_k(&[0.1, 0.9, 0.2], &m, 2).unwrap(), m);
    }

    #[test]
    fn adjust_reincludes_highest_pruned() {
        let m = HeadMask::from_indices(4, &[0]).unwrap();
        assert_eq!(kept(&adjust_mask_to_k(&[0.9, 0.8, 0.1, 0.0], &m, 2).unwrap()), vec![0, 1]);
    }

    #[test]
    fn adjust_drops_smallest_kept() {
        let m = HeadMask::all(3);
        assert_eq!(kept(&adjust_mask_to_k(&[0.9, 0.8, 0.7], &m, 1).unwrap()), vec![0]);
    }

    #[test]
    fn adjust_ties_prefer_lowest_index() {
        let m = HeadMask::none(4);
        assert_eq!(kept(&adjust_mask_to_k(&[0.5, 0.5, 0.5, 0.5], &m, 2).unwrap()), vec![0, 1]);
        let m = HeadMask::all(4);
        assert_eq!(kept(&adjust_mask_to_k(&[0.5, 0.5, 0.5, 0.5], &m, 2).unwrap()), vec![0, 1]);
    }
}
