use super::config::ExperimentConfig;
use super::output::{append_line, existing_keys, json_line, sweep_key, sweep_row, SWEEP_HEADER};
use super::run::{run_cell, DenseCache, SweepRecord};
use crate::error::Result;
use crate::pruners::Method;
use serde::Serialize;
use std::path::Path;

/// One planned cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub seed: u64,
}

/// Cells in deterministic order: method, then K (or lambda), then seed.
/// Voita pairs each K with the lambda at the same position when the lists
/// have equal length, and otherwise uses the first lambda for every K.
pub fn plan(cfg: &ExperimentConfig, methods: &[Method]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &method in methods {
        let targets: Vec<(Option<usize>, Option<f64>)> = match method {
            Method::Unpruned => vec![(None, None)],
            Method::Voita if cfg.k.is_empty() => cfg.lambda.iter().map(|&l| (None, Some(l))).collect(),
            Method::Voita => {
                let paired = cfg.lambda.len() == cfg.k.len();
                cfg.k
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| (Some(k), cfg.lambda.get(if paired { i } else { 0 }).copied()))
                    .collect()
            }
            _ => cfg.k.iter().map(|&k| (Some(k), None)).collect(),
        };
        for (k, lambda) in targets {
            for &seed in &cfg.seeds {
                cells.push(Cell { method, k, lambda, seed });
            }
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize)]
struct OutcomeLine<'a> {
    method: Method,
    k: Option<usize>,
    lambda: Option<f64>,
    seed: u64,
    status: &'a str,
    error: Option<String>,
    mask: Option<String>,
    raw_kept: Option<usize>,
    metric_pre: Option<f64>,
    metric_post: Option<f64>,
    final_loss: Option<f64>,
    epoch_losses: Vec<f64>,
}

/// Summary of a sweep invocation.
#[derive(Debug, Clone, Default)]
pub struct SweepSummary {
    pub records: Vec<(Cell, SweepRecord)>,
    pub skipped: usize,
    pub failed: Vec<(Cell, String)>,
}

/// Runs every planned cell not already in `out_dir/sweep.csv`, appending a
/// row per success and an outcome line per cell to `outcomes.jsonl`.
/// Failed cells are logged and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, methods: &[Method], out_dir: &Path) -> Result<SweepSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let csv = out_dir.join("sweep.csv");
    let outcomes = out_dir.join("outcomes.jsonl");
    let done = existing_keys(&csv)?;
    let mut cache = DenseCache::new();
    let mut summary = SweepSummary::default();
    for cell in plan(cfg, methods) {
        let key_probe = SweepRecord {
            method: cell.method,
            k: cell.k.unwrap_or(0),
            lambda: cell.lambda,
            seed: cell.seed,
            metric_pre: 0.0,
            metric_post: 0.0,
            params: 0,
            fwd_us: 0.0,
            mask: String::new(),
        };
        if done.contains(&sweep_key(&key_probe, cell.k.or(Some(cfg.head_count())))) {
            summary.skipped += 1;
            continue;
        }
        match run_cell(cfg, cell.method, cell.k, cell.lambda, cell.seed, &mut cache) {
            Ok(res) => {
                let requested = cell.k.or(Some(cfg.head_count()));
                let requested = if cell.method == Method::Voita && cell.k.is_none() { None } else { requested };
                append_line(&csv, Some(SWEEP_HEADER), &sweep_row(&res.record, requested))?;
                let line = OutcomeLine {
                    method: cell.method,
                    k: cell.k,
                    lambda: cell.lambda,
                    seed: cell.seed,
                    status: "ok",
                    error: None,
                    mask: Some(res.record.mask.clone()),
                    raw_kept: res.outcome.raw_kept,
                    metric_pre: res.outcome.metric_pre,
                    metric_post: res.outcome.metric_post,
                    final_loss: res.outcome.history.last().map(|r| r.loss),
                    epoch_losses: res.epoch_losses.clone(),
                };
                append_line(&outcomes, None, &json_line(&line)?)?;
                summary.records.push((cell, res.record));
            }
            Err(e) => {
                let line = OutcomeLine {
                    method: cell.method,
                    k: cell.k,
                    lambda: cell.lambda,
                    seed: cell.seed,
                    status: "failed",
                    error: Some(e.to_string()),
                    mask: None,
                    raw_kept: None,
                    metric_pre: None,
                    metric_post: None,
                    final_loss: None,
                    epoch_losses: Vec::new(),
                };
                append_line(&outcomes, None, &json_line(&line)?)?;
                summary.failed.push((cell, e.to_string()));
            }
        }
    }
    Ok(summary)
}
