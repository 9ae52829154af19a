//! One train/prune/fine-tune cycle per (method, K or lambda, seed).

use super::config::{ExperimentConfig, ScoreSplit, Task};
use super::data::{gen_needle_data, gen_reversal_data, Dataset};
use super::eval::evaluate;
use crate::error::{Error, Result};
use crate::gumbel::HeadMask;
use crate::pruners::{
    adjust_mask_to_k, default_block, finalize_and_finetune, finetune_mask, michel_prune, pipelined_dsp,
    train_fixed, train_joint, train_voita, JointKind, Method, PruningOutcome, StepRecord, TrainSettings,
};
use crate::rng::{stream, Stream};
use crate::transformer::{Batch, GatedTransformer};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

/// Train, held-out and test splits of one seed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub held_out: Dataset,
    pub test: Dataset,
}

fn split_seed(seed: u64, split: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(split)
}

pub fn make_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let d = &cfg.data;
    let gen = |split: u64, size: usize| -> Result<Dataset> {
        let s = split_seed(seed, split);
        Ok(match cfg.task {
            Task::NeedleClassification => Dataset::Needle(gen_needle_data(s, size, d.vocab, d.length)?),
            Task::SequenceReversal => Dataset::Reversal(gen_reversal_data(s, size, d.vocab, d.length)?),
        })
    };
    Ok(Splits { train: gen(0, d.train_size)?, held_out: gen(1, d.eval_size)?, test: gen(2, d.eval_size)? })
}

/// One result row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: Method,
    pub k: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub metric_pre: f64,
    pub metric_post: f64,
    pub params: usize,
    pub fwd_us: f64,
    pub mask: String,
}

/// Everything a single cell produces.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub record: SweepRecord,
    pub outcome: PruningOutcome,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub model: GatedTransformer,
}

/// Per-seed state shared by pipelined methods: the densely trained model.
#[derive(Default)]
pub struct DenseCache {
    models: HashMap<u64, (GatedTransformer, Vec<f64>)>,
}

impl DenseCache {
    pub fn new() -> Self {
        DenseCache::default()
    }
}

fn settings(cfg: &ExperimentConfig, steps: u64) -> TrainSettings {
    TrainSettings { lr_theta: cfg.lr_theta, lr_w: cfg.lr_w, steps, clip_norm: cfg.clip_norm }
}

fn epoch_means(history: &[StepRecord], per_epoch: usize) -> Vec<f64> {
    history
        .chunks(per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Median wallclock of a forward pass of `model` on `batch`, in microseconds.
pub fn forward_micros(model: &GatedTransformer, batch: &Batch, runs: usize) -> Result<f64> {
    model.logits_value(batch)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        model.logits_value(batch)?;
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(super::bench::median(&mut times))
}

/// Runs one cell. `k` is required except for unpruned runs and Voita
/// without a target size.
pub fn run_cell(
    cfg: &ExperimentConfig,
    method: Method,
    k: Option<usize>,
    lambda: Option<f64>,
    seed: u64,
    cache: &mut DenseCache,
) -> Result<CellResult> {
    let h = cfg.head_count();
    let splits = make_splits(cfg, seed)?;
    let per_epoch = splits.train.steps_per_epoch(cfg.batch_size);
    // One extra shuffled epoch feeds the pipelined importance pass.
    let mut batch_rng = stream(seed, Stream::Batches);
    let mut batches = splits.train.shuffled_batches(cfg.batch_size, cfg.epochs + 1, &mut batch_rng);
    let extra = batches.split_off(per_epoch * cfg.epochs);
    let steps = batches.len() as u64;
    let train = settings(cfg, steps);
    let finetune = settings(cfg, cfg.finetune_steps);
    let test = &splits.test;
    let eval = |m: &GatedTransformer, mask: &HeadMask| evaluate(m, mask, test);
    let need_k = || k.ok_or_else(|| Error::Config(format!("{method} needs a target K")));

    let dense = |cache: &mut DenseCache| -> Result<(GatedTransformer, Vec<f64>)> {
        if let Some(hit) = cache.models.get(&seed) {
            return Ok(hit.clone());
        }
        let mut model = GatedTransformer::build(cfg.model.clone(), &mut stream(seed, Stream::Init))?;
        let history = train_fixed(&mut model, None, &batches, &train)?;
        let losses = epoch_means(&history, per_epoch);
        cache.models.insert(seed, (model.clone(), losses.clone()));
        Ok((model, losses))
    };

    let (mut model, outcome, epoch_losses) = match method {
        Method::Unpruned => {
            let (mut model, losses) = dense(cache)?;
            let o = finetune_mask(&mut model, method, HeadMask::all(h), vec![1.0; h], &[], &settings(cfg, 0), &eval)?;
            (model, o, losses)
        }
        Method::Michel => {
            let k = need_k()?;
            let (mut model, losses) = dense(cache)?;
            let score_data = match cfg.michel_split {
                ScoreSplit::HeldOut => splits.held_out.batches(cfg.batch_size),
                ScoreSplit::Train => splits.train.batches(cfg.batch_size),
            };
            let block = cfg.michel_block.unwrap_or_else(|| default_block(h));
            let (mask, scores) = michel_prune(&model, &score_data, block, k)?;
            let o = finetune_mask(&mut model, method, mask, scores, &batches, &finetune, &eval)?;
            (model, o, losses)
        }
        Method::PipelinedDsp => {
            let k = need_k()?;
            let (mut model, losses) = dense(cache)?;
            let mut gumbel = stream(seed, Stream::Gumbel);
            let pass = pipelined_dsp(&model, &extra, k, &cfg.schedule, cfg.lr_w, extra.len() as u64, &mut gumbel)?;
            let mut o = finetune_mask(&mut model, method, pass.mask, pass.scores, &batches, &finetune, &eval)?;
            o.history = [pass.history, o.history].concat();
            (model, o, losses)
        }
        Method::JointDsp | Method::Ste => {
            let k = need_k()?;
            let mut model = GatedTransformer::build(cfg.model.clone(), &mut stream(seed, Stream::Init))?;
            let mut w = vec![0.0; h];
            let kind = if method == Method::Ste { JointKind::Ste } else { JointKind::Dsp(cfg.schedule) };
            let mut gumbel = stream(seed, Stream::Gumbel);
            let history = train_joint(&mut model, &mut w, k, kind, &batches, &train, &mut gumbel)?;
            let losses = epoch_means(&history, per_epoch);
            let mut o = finalize_and_finetune(&mut model, method, &w, k, &batches, &finetune, &eval)?;
            o.history = [history, o.history].concat();
            (model, o, losses)
        }
        Method::Voita => {
            let lambda = lambda.ok_or_else(|| Error::Config("voita needs a lambda".into()))?;
            let hc = cfg.hard_concrete;
            let mut model = GatedTransformer::build(cfg.model.clone(), &mut stream(seed, Stream::Init))?;
            let mut phi = vec![cfg.phi_init; h];
            let mut rng = stream(seed, Stream::HardConcrete);
            let history = train_voita(&mut model, &mut phi, lambda, &hc, &batches, &train, &mut rng)?;
            let losses = epoch_means(&history, per_epoch);
            let raw = crate::pruners::hard_concrete_mask(&phi, &hc);
            let ranking: Vec<f64> = phi.iter().map(|&p| hc.stretched_mean(p)).collect();
            let mask = match k {
                Some(k) => adjust_mask_to_k(&ranking, &raw, k)?,
                None => raw.clone(),
            };
            let probs: Vec<f64> = phi.iter().map(|&p| hc.prob_nonzero(p)).collect();
            let mut o = finetune_mask(&mut model, method, mask, probs, &batches, &finetune, &eval)?;
            o.raw_kept = Some(raw.count());
            o.history = [history, o.history].concat();
            (model, o, losses)
        }
    };
    model = model.compact(&outcome.mask)?;
    let probe = test.batch(&(0..cfg.batch_size.min(test.len())).collect::<Vec<_>>());
    let fwd_us = forward_micros(&model, &probe, 20)?;
    let record = SweepRecord {
        method,
        k: outcome.mask.count(),
        lambda,
        seed,
        metric_pre: outcome.metric_pre.unwrap_or(f64::NAN),
        metric_post: outcome.metric_post.unwrap_or(f64::NAN),
        params: model.param_count(),
        fwd_us,
        mask: outcome.mask.to_bit_string(),
    };
    Ok(CellResult { record, outcome, epoch_losses, model })
}
