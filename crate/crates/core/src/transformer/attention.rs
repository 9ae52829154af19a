use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Projection matrices of one head: `wq`, `wk`, `wv` are `d x d_k`, `wo` is
/// `d_k x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl HeadWeights {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let (d, dk) = match wq.shape() {
            [d, dk] => (*d, *dk),
            s => return Err(Error::Dimension(format!("wq must be 2-d, got {s:?}"))),
        };
        if wk.shape() != [d, dk] || wv.shape() != [d, dk] || wo.shape() != [dk, d] {
            return Err(Error::Dimension(format!(
                "head projections disagree: wq {:?}, wk {:?}, wv {:?}, wo {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape(),
                wo.shape()
            )));
        }
        Ok(HeadWeights { wq, wk, wv, wo })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.wq.shape()[1]
    }
}

/// Tape handles for one head's projections.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Upper-triangular additive mask; blocked logits get this value.
pub const MASKED_LOGIT: f64 = -1e9;

pub fn causal_mask(tape: &mut Tape, tq: usize, tk: usize) -> Result<NodeId> {
    let mut m = Tensor::zeros(&[tq, tk]);
    for i in 0..tq {
        for j in i + 1..tk {
            m.data_mut()[i * tk + j] = MASKED_LOGIT;
        }
    }
    tape.constant(m)
}

/// One head over a batch: `xq` is `[B, Tq, d]`, `xkv` is `[B, Tk, d]`,
/// result is `[B, Tq, d]`. Logits are scaled by `1 / sqrt(d_k)`.
pub fn head_forward(
    tape: &mut Tape,
    head: HeadNodes,
    xq: NodeId,
    xkv: NodeId,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let dk = tape.shape(head.wq)[1];
    let q = tape.matmul(xq, head.wq)?;
    let k = tape.matmul(xkv, head.wk)?;
    let v = tape.matmul(xkv, head.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(m) = mask {
        scores = tape.add_broadcast(scores, m)?;
    }
    let alpha = tape.softmax(scores, 2)?;
    let mixed = tape.bmm(alpha, v)?;
    tape.matmul(mixed, head.wo)
}

fn sequence_tensor(z: &[Vec<f64>], d: usize) -> Result<Tensor> {
    if z.is_empty() {
        return Err(Error::Domain("attention over an empty sequence".into()));
    }
    if let Some(bad) = z.iter().find(|v| v.len() != d) {
        return Err(Error::Dimension(format!("sequence vector of width {} vs d = {d}", bad.len())));
    }
    Tensor::new(&[1, z.len(), d], z.concat())
}

fn bind_head(tape: &mut Tape, head: &HeadWeights) -> Result<HeadNodes> {
    Ok(HeadNodes {
        wq: tape.constant(head.wq.clone())?,
        wk: tape.constant(head.wk.clone())?,
        wv: tape.constant(head.wv.clone())?,
        wo: tape.constant(head.wo.clone())?,
    })
}

/// Attention of one query vector `q` over the sequence `z`.
pub fn attention_head_forward(head: &HeadWeights, z: &[Vec<f64>], q: &[f64]) -> Result<Vec<f64>> {
    gated_multihead_forward(std::slice::from_ref(head), &[1.0], z, q)
}

/// `sum_h gates[h] * att_h(z, q)` for one query vector.
pub fn gated_multihead_forward(
    heads: &[HeadWeights],
    gates: &[f64],
    z: &[Vec<f64>],
    q: &[f64],
) -> Result<Vec<f64>> {
    if heads.len() != gates.len() {
        return Err(Error::Contract(format!("{} gates for {} heads", gates.len(), heads.len())));
    }
    let d = heads.first().map(HeadWeights::model_dim).unwrap_or(q.len());
    if q.len() != d {
        return Err(Error::Dimension(format!("query width {} vs d = {d}", q.len())));
    }
    let mut tape = Tape::new();
    let zs = tape.constant(sequence_tensor(z, d)?)?;
    let qs = tape.constant(Tensor::new(&[1, 1, d], q.to_vec())?)?;
    let mut out = vec![0.0; d];
    for (head, &g) in heads.iter().zip(gates) {
        let nodes = bind_head(&mut tape, head)?;
        let o = head_forward(&mut tape, nodes, qs, zs, None)?;
        for (acc, v) in out.iter_mut().zip(tape.data(o)) {
            *acc += g * v;
        }
    }
    Ok(out)
}
