//! Synthetic tasks.

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::transformer::{Batch, ClassifyBatch, Seq2seqBatch};
use rand::seq::SliceRandom;
use rand::Rng;

/// The token whose repeated presence makes a sequence positive.
pub const NEEDLE: usize = 0;

/// Sequences labeled 1 iff [`NEEDLE`] occurs at least twice.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleData {
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub vocab: usize,
    pub length: usize,
}

/// Source sequences whose targets are their reversals.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversalData {
    pub sources: Vec<Vec<usize>>,
    pub vocab: usize,
    pub length: usize,
}

fn check_shape(vocab: usize, length: usize) -> Result<()> {
    if vocab < 4 || length < 4 {
        return Err(Error::Domain(format!("need vocab >= 4 and length >= 4, got {vocab} and {length}")));
    }
    Ok(())
}

/// Needle count of a sequence.
pub fn needle_count(seq: &[usize]) -> usize {
    seq.iter().filter(|&&t| t == NEEDLE).count()
}

pub fn needle_label(seq: &[usize]) -> usize {
    usize::from(needle_count(seq) >= 2)
}

/// Balanced needle data: half the examples hold 0 or 1 needles, half hold
/// 2 or 3, with filler drawn from the other tokens.
pub fn gen_needle_data(seed: u64, size: usize, vocab: usize, length: usize) -> Result<NeedleData> {
    check_shape(vocab, length)?;
    let positives = size / 2;
    let negatives = size - positives;
    // Odd sizes leave a one-example imbalance, which exceeds 2% below 25.
    if size == 0 || (negatives - positives) as f64 > 0.02 * size as f64 * 2.0 {
        return Err(Error::Domain(format!("cannot balance {size} examples within 2%")));
    }
    let mut rng = stream(seed, Stream::Data);
    let mut labels: Vec<usize> = std::iter::repeat(1).take(positives).chain(std::iter::repeat(0).take(negatives)).collect();
    labels.shuffle(&mut rng);
    let mut sequences = Vec::with_capacity(size);
    for &label in &labels {
        let count = if label == 1 { rng.gen_range(2..=3) } else { rng.gen_range(0..=1) };
        let mut seq: Vec<usize> = (0..length).map(|_| rng.gen_range(1..vocab)).collect();
        let mut pos: Vec<usize> = (0..length).collect();
        pos.shuffle(&mut rng);
        for &p in pos.iter().take(count) {
            seq[p] = NEEDLE;
        }
        debug_assert_eq!(needle_label(&seq), label);
        sequences.push(seq);
    }
    Ok(NeedleData { sequences, labels, vocab, length })
}

/// Uniform random sources over `vocab` tokens. Decoder inputs start with a
/// BOS token numbered `vocab`, so models need `vocab + 1` embeddings.
pub fn gen_reversal_data(seed: u64, size: usize, vocab: usize, length: usize) -> Result<ReversalData> {
    check_shape(vocab, length)?;
    let mut rng = stream(seed, Stream::Data);
    let sources = (0..size).map(|_| (0..length).map(|_| rng.gen_range(0..vocab)).collect()).collect();
    Ok(ReversalData { sources, vocab, length })
}

pub fn reversed(src: &[usize]) -> Vec<usize> {
    src.iter().rev().cloned().collect()
}

impl ReversalData {
    pub fn bos(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.sources.iter().map(|s| reversed(s)).collect()
    }

    /// Teacher-forced batch of the given examples.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let t = self.length;
        let mut src = Vec::with_capacity(idx.len() * t);
        let mut tgt_in = Vec::with_capacity(idx.len() * t);
        let mut tgt_out = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            let s = &self.sources[i];
            let r = reversed(s);
            src.extend_from_slice(s);
            tgt_in.push(self.bos());
            tgt_in.extend_from_slice(&r[..t - 1]);
            tgt_out.extend_from_slice(&r);
        }
        Batch::Seq2seq(Seq2seqBatch { src, tgt_in, tgt_out, batch: idx.len(), src_len: t, tgt_len: t })
    }
}

impl NeedleData {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fraction of the majority label.
    pub fn majority_rate(&self) -> f64 {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        ones.max(self.labels.len() - ones) as f64 / self.labels.len().max(1) as f64
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let tokens = idx.iter().flat_map(|&i| self.sequences[i].iter().cloned()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Batch::Classify(ClassifyBatch { tokens, labels, batch: idx.len(), len: self.length })
    }
}

/// Either task's dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Needle(NeedleData),
    Reversal(ReversalData),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Needle(d) => d.len(),
            Dataset::Reversal(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        match self {
            Dataset::Needle(d) => d.batch(idx),
            Dataset::Reversal(d) => d.batch(idx),
        }
    }

    /// Sequential batches covering the dataset once, last one possibly short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// `epochs` passes over the data in a fresh shuffled order each pass,
    /// full batches only.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch_size: usize, epochs: usize, rng: &mut R) -> Vec<Batch> {
        let n = self.len();
        let bs = batch_size.clamp(1, n.max(1));
        let mut out = Vec::new();
        for _ in 0..epochs {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            for c in idx.chunks_exact(bs) {
                out.push(self.batch(c));
            }
        }
        out
    }

    /// Full batches in one epoch.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        let bs = batch_size.clamp(1, self.len().max(1));
        self.len() / bs
    }
}
