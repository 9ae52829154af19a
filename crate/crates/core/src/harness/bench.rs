//! Compaction timing, head distribution, training dynamics and the
//! sampling oracle check.

use crate::error::{Error, Result};
use crate::gumbel::{hard_top_k, sample_gumbel, subset_probability_oracle, HeadMask, ImportanceWeights};
use crate::pruners::StepRecord;
use crate::rng::{stream, Stream};
use crate::transformer::{AttentionKind, Batch, GatedTransformer, ModelConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Minimum timed runs per repeat.
pub const MIN_RUNS: usize = 100;
/// Relative spread of repeat medians above which a row is flagged.
pub const JITTER_LIMIT: f64 = 0.20;

/// Size and speed of one compacted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kept: usize,
    pub pruned_pct: f64,
    pub params: usize,
    pub median_us: f64,
    /// `(max - min) / min` over the repeat medians.
    pub jitter: f64,
    pub unstable: bool,
    pub speedup_pct: f64,
    pub shrink_pct: f64,
    /// Largest output difference between the compacted and masked model.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub runs: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { runs: MIN_RUNS, warmup: 10, repeats: 3 }
    }
}

fn time_forward(model: &GatedTransformer, batch: &Batch, s: &BenchSettings) -> Result<Vec<f64>> {
    for _ in 0..s.warmup {
        model.logits_value(batch)?;
    }
    let mut medians = Vec::with_capacity(s.repeats);
    for _ in 0..s.repeats.max(1) {
        let mut times = Vec::with_capacity(s.runs);
        for _ in 0..s.runs {
            let t = Instant::now();
            std::hint::black_box(model.logits_value(batch)?);
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        medians.push(median(&mut times));
    }
    Ok(medians)
}

/// Times each compacted model against the unpruned one. Repeats are
/// interleaved across masks so slow drift affects all rows alike.
pub fn bench_speedup(model: &GatedTransformer, masks: &[HeadMask], batch: &Batch, s: &BenchSettings) -> Result<Vec<BenchRow>> {
    if s.runs < MIN_RUNS {
        return Err(Error::Domain(format!("at least {MIN_RUNS} timed runs are required")));
    }
    let h = model.head_count();
    let base_params = model.param_count();
    let mut compacted = Vec::with_capacity(masks.len());
    let mut diffs = Vec::with_capacity(masks.len());
    for mask in masks {
        let small = model.compact(mask)?;
        let masked = model.with_mask(mask)?.logits_value(batch)?;
        diffs.push(small.logits_value(batch)?.max_abs_diff(&masked));
        compacted.push(small);
    }
    let mut per_mask: Vec<Vec<f64>> = vec![Vec::new(); masks.len()];
    let mut base: Vec<f64> = Vec::new();
    let one = BenchSettings { repeats: 1, ..*s };
    for _ in 0..s.repeats.max(1) {
        base.extend(time_forward(model, batch, &one)?);
        for (i, m) in compacted.iter().enumerate() {
            per_mask[i].extend(time_forward(m, batch, &one)?);
        }
    }
    let base_us = median(&mut base.clone());
    let mut rows = Vec::with_capacity(masks.len());
    for ((mask, m), (reps, diff)) in masks.iter().zip(&compacted).zip(per_mask.iter_mut().zip(diffs)) {
        let lo = reps.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = reps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let jitter = (hi - lo) / lo;
        let med = median(reps);
        rows.push(BenchRow {
            kept: mask.count(),
            pruned_pct: 100.0 * (h - mask.count()) as f64 / h as f64,
            params: m.param_count(),
            median_us: med,
            jitter,
            unstable: jitter > JITTER_LIMIT,
            speedup_pct: 100.0 * (base_us - med) / base_us,
            shrink_pct: 100.0 * (base_params - m.param_count()) as f64 / base_params as f64,
            max_abs_diff: diff,
        });
    }
    Ok(rows)
}

/// Random masks keeping `round(H * (1 - p))` heads for each pruned fraction `p`.
pub fn masks_at_fractions(h: usize, fractions: &[f64], seed: u64) -> Result<Vec<HeadMask>> {
    let mut rng = stream(seed, Stream::Eval);
    let w = ImportanceWeights::new(vec![0.0; h])?;
    fractions
        .iter()
        .map(|&p| {
            let keep = ((h as f64) * (1.0 - p)).round() as usize;
            if keep == 0 {
                return Ok(HeadMask::none(h));
            }
            let r = w.perturb(&sample_gumbel(h, &mut rng)?)?;
            hard_top_k(&r, keep)
        })
        .collect()
}

/// Kept heads per attention type and layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadDistribution {
    /// `(type, layer, kept, total)` in flat head order.
    pub layers: Vec<(AttentionKind, usize, usize, usize)>,
    pub by_kind: Vec<(AttentionKind, usize, usize)>,
}

impl HeadDistribution {
    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.2).sum()
    }
}

pub fn report_head_distribution(mask: &HeadMask, config: &ModelConfig) -> Result<HeadDistribution> {
    let h = config.total_heads();
    if mask.len() != h {
        return Err(Error::Contract(format!("mask of length {} for {h} heads", mask.len())));
    }
    let per = config.heads;
    let mut layers = Vec::new();
    let mut kinds: Vec<(AttentionKind, usize, usize)> = Vec::new();
    for (i, (kind, layer)) in config.sublayers().into_iter().enumerate() {
        let kept = (i * per..(i + 1) * per).filter(|&j| mask.is_kept(j)).count();
        layers.push((kind, layer, kept, per));
        match kinds.iter_mut().find(|k| k.0 == kind) {
            Some(k) => {
                k.1 += kept;
                k.2 += per;
            }
            None => kinds.push((kind, kept, per)),
        }
    }
    Ok(HeadDistribution { layers, by_kind: kinds })
}

/// Eventual-keep at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRecord {
    pub step: u64,
    pub tau: Option<f64>,
    pub loss: f64,
    /// Share of the noise-free top-K after this step that is in the final set.
    pub eventual_keep_pct: f64,
    /// Same share for the noisy selection the step trained with.
    pub selected_keep_pct: Option<f64>,
}

fn keep_pct(bits: &str, final_mask: &HeadMask) -> Result<f64> {
    let m = HeadMask::from_bit_string(bits)?;
    if m.len() != final_mask.len() {
        return Err(Error::Contract("snapshot length differs from the final mask".into()));
    }
    Ok(if m.count() == 0 {
        if final_mask.count() == 0 { 100.0 } else { 0.0 }
    } else {
        100.0 * m.overlap(final_mask) as f64 / m.count() as f64
    })
}

/// Eventual-keep per step, in percent.
pub fn track_dynamics(history: &[StepRecord], final_mask: &HeadMask) -> Result<Vec<DynamicsRecord>> {
    history
        .iter()
        .map(|r| {
            let bits = r
                .top_k
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("step {} has no top-K snapshot", r.step)))?;
            Ok(DynamicsRecord {
                step: r.step,
                tau: r.tau,
                loss: r.loss,
                eventual_keep_pct: keep_pct(bits, final_mask)?,
                selected_keep_pct: r.selected.as_deref().map(|b| keep_pct(b, final_mask)).transpose()?,
            })
        })
        .collect()
}

/// Whether eventual-keep is 100% at every step of the last `fraction` of
/// the run.
pub fn holds_final(records: &[DynamicsRecord], fraction: f64) -> bool {
    let start = records.len() - ((records.len() as f64 * fraction).round() as usize).min(records.len());
    !records.is_empty() && records[start..].iter().all(|r| r.eventual_keep_pct == 100.0)
}

/// First step from which eventual-keep stays at 100% to the end.
pub fn settled_from(records: &[DynamicsRecord]) -> Option<u64> {
    let mut first = None;
    for r in records.iter().rev() {
        if r.eventual_keep_pct == 100.0 {
            first = Some(r.step);
        } else {
            break;
        }
    }
    first
}

/// Smallest sample count `oracle_check` accepts.
pub const MIN_ORACLE_SAMPLES: usize = 10_000;
pub const ORACLE_MAX_H: usize = 10;

/// Monte-Carlo subset frequencies next to exact probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub h: usize,
    pub k: usize,
    pub samples: usize,
    pub importance: Vec<f64>,
    /// `(subset bits, empirical, exact)` for every K-subset.
    pub subsets: Vec<(String, f64, f64)>,
    pub tv_distance: f64,
}

impl OracleReport {
    pub fn frequency_of(&self, bits: &str) -> Option<(f64, f64)> {
        self.subsets.iter().find(|s| s.0 == bits).map(|s| (s.1, s.2))
    }
}

fn k_subsets(h: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, h: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..h {
            cur.push(i);
            rec(i + 1, h, k, cur, out);
            cur.pop();
        }
    }
    rec(0, h, k, &mut cur, &mut out);
    out
}

/// Compares hard top-K sampling under Gumbel noise with the exact
/// permutation-sum subset probabilities.
pub fn oracle_check(importance: &[f64], k: usize, samples: usize, seed: u64) -> Result<OracleReport> {
    let h = importance.len();
    if samples < MIN_ORACLE_SAMPLES {
        return Err(Error::Domain(format!("{samples} samples is below the minimum {MIN_ORACLE_SAMPLES}")));
    }
    if h > ORACLE_MAX_H {
        return Err(Error::Domain(format!("H = {h} exceeds {ORACLE_MAX_H}")));
    }
    let w = ImportanceWeights::from_importance(importance)?;
    let mut rng = stream(seed, Stream::Gumbel);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..samples {
        let r = w.perturb(&sample_gumbel(h, &mut rng)?)?;
        *counts.entry(hard_top_k(&r, k)?.to_bit_string()).or_default() += 1;
    }
    let mut subsets = BTreeMap::new();
    let mut tv = 0.0;
    for s in k_subsets(h, k) {
        let exact = subset_probability_oracle(&w, &s)?;
        let bits = HeadMask::from_indices(h, &s)?.to_bit_string();
        let emp = counts.get(&bits).copied().unwrap_or(0) as f64 / samples as f64;
        tv += (emp - exact).abs();
        subsets.insert(bits, (emp, exact));
    }
    Ok(OracleReport {
        h,
        k,
        samples,
        importance: importance.to_vec(),
        subsets: subsets.into_iter().rev().map(|(b, (e, x))| (b, e, x)).collect(),
        tv_distance: 0.5 * tv,
    })
}
