//! Task metrics on binary-masked models.

use super::data::{Dataset, NeedleData, ReversalData};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::gumbel::HeadMask;
use crate::transformer::{Batch, GatedTransformer, Gates};

const EVAL_BATCH: usize = 64;

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy of the (already compacted) model.
pub fn accuracy(model: &GatedTransformer, data: &NeedleData) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk);
        let logits = model.logits_value(&batch)?;
        let c = logits.shape()[1];
        for (row, &i) in logits.data().chunks(c).zip(chunk) {
            correct += usize::from(argmax(row) == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Greedy autoregressive decoding of every source in `chunk`.
pub fn greedy_decode(model: &GatedTransformer, data: &ReversalData, chunk: &[usize]) -> Result<Vec<Vec<usize>>> {
    let t = data.length;
    let b = chunk.len();
    let src: Vec<usize> = chunk.iter().flat_map(|&i| data.sources[i].iter().cloned()).collect();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false)?;
    let memory = model.encode(&mut tape, &p, Gates::Ones, &src, b, t)?;
    let mut out: Vec<Vec<usize>> = vec![Vec::with_capacity(t); b];
    let v = model.config().vocab;
    for step in 0..t {
        let len = step + 1;
        let mut tgt_in = Vec::with_capacity(b * len);
        for seq in &out {
            tgt_in.push(data.bos());
            tgt_in.extend_from_slice(seq);
        }
        let logits = model.decode(&mut tape, &p, Gates::Ones, memory, &tgt_in, b, len)?;
        let vals = tape.data(logits);
        for (e, seq) in out.iter_mut().enumerate() {
            let at = (e * len + step) * v;
            seq.push(argmax(&vals[at..at + v]));
        }
    }
    Ok(out)
}

/// Token accuracy of greedy decoding against the reversed sources.
pub fn token_accuracy(model: &GatedTransformer, data: &ReversalData) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let preds = greedy_decode(model, data, chunk)?;
        for (pred, &i) in preds.iter().zip(chunk) {
            let want = super::data::reversed(&data.sources[i]);
            correct += pred.iter().zip(&want).filter(|(a, b)| a == b).count();
        }
    }
    Ok(correct as f64 / (data.len() * data.length).max(1) as f64)
}

/// Task metric of `model` restricted to `mask`; the model is compacted
/// first so evaluation runs on binary gates only.
pub fn evaluate(model: &GatedTransformer, mask: &HeadMask, data: &Dataset) -> Result<f64> {
    let small = model.compact(mask)?;
    match data {
        Dataset::Needle(d) => accuracy(&small, d),
        Dataset::Reversal(d) => token_accuracy(&small, d),
    }
}

/// Mean loss over `batches` with the given mask applied as gates.
pub fn mean_loss(model: &GatedTransformer, mask: &HeadMask, batches: &[Batch]) -> Result<f64> {
    let view = model.with_mask(mask)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches {
        total += view.loss_value(b)? * b.size() as f64;
        n += b.size();
    }
    Ok(total / n.max(1) as f64)
}

/// Token accuracy of echoing the source unchanged.
pub fn copy_baseline_accuracy(data: &ReversalData) -> f64 {
    let mut correct = 0usize;
    for s in &data.sources {
        let r = super::data::reversed(s);
        correct += s.iter().zip(&r).filter(|(a, b)| a == b).count();
    }
    correct as f64 / (data.len() * data.length).max(1) as f64
}
