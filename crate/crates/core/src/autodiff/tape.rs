use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    MulBroadcast(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogClamped(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Softmax(NodeId, usize),
    LogOneMinusSoftmax { input: NodeId, lse: f64, lse_without: Vec<f64> },
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Clamp(NodeId, f64, f64),
    GateScale { x: NodeId, gates: NodeId, head: usize },
    Elementwise { input: NodeId, derivative: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run recording of tensor operations for reverse-mode
/// differentiation. Nodes are appended in evaluation order, so the node
/// list is always topologically sorted.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Gradient of the last backward pass, present for trainable leaves.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Clears leaf gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Records a leaf; gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        check_finite("leaf", t.data())?;
        let mut t = t;
        t.grad = None;
        Ok(self.push_node(t, Op::Leaf))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_grad())
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, what: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        check_finite(what, &data)?;
        let mut t = Tensor::from_parts(shape, data);
        t.requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        Ok(self.push_node(t, op))
    }

    fn same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, what: &str, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(what, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(what, shape, data, op, &[a, b])
    }

    fn map(&mut self, what: &str, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(what, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn broadcast_len(&self, what: &str, a: NodeId, b: NodeId) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!("{what}: {sb:?} is not a suffix of {sa:?}")));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` with `b` tiled over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.broadcast_len("add_broadcast", a, b)?;
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x + bd[i % m]).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_broadcast", shape, data, Op::AddBroadcast(a, b), &[a, b])
    }

    /// `a * b` with `b` tiled over the leading axes of `a`.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.broadcast_len("mul_broadcast", a, b)?;
        let bd = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, &x)| x * bd[i % m]).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_broadcast", shape, data, Op::MulBroadcast(a, b), &[a, b])
    }

    /// `[..., k] x [k, n] -> [..., n]`; leading axes of `a` act as rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", shape, out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bsz {
            gemm_nn(&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        self.push("bmm", vec![bsz, m, n], out, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 2].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        self.push("transpose", shape, out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Dimension(format!("reshape {:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.map("log", a, Op::Log(a), f64::ln)
    }

    /// `log(max(a, floor))`; the gradient is zero wherever the floor binds.
    pub fn log_clamped(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        if floor <= 0.0 {
            return Err(Error::Domain("log floor must be positive".into()));
        }
        self.map("log_clamped", a, Op::LogClamped(a, floor), |x| x.max(floor).ln())
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!("sum_axis: axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("sum_axis", shape, out, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Dimension(format!("mean_axis: axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!("softmax: axis {axis} for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        if n == 0 {
            return Err(Error::Domain("softmax over empty axis".into()));
        }
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let m = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..n {
                    let e = (src[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        self.push("softmax", s, out, Op::Softmax(a, axis), &[a])
    }

    /// `log(1 - softmax(a))` for a vector, computed as
    /// `logsumexp(a without i) - logsumexp(a)` so it stays exact when a
    /// softmax entry rounds to 1.
    pub fn log_one_minus_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(Error::Dimension(format!("log_one_minus_softmax expects a vector, got {s:?}")));
        }
        let z = self.data(a);
        let n = z.len();
        if n < 2 {
            return Err(Error::Domain("log(1 - softmax) of a single entry is -inf".into()));
        }
        let lse_of = |skip: Option<usize>| {
            let it = || z.iter().enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| *v);
            let m = it().fold(f64::NEG_INFINITY, f64::max);
            m + it().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let lse = lse_of(None);
        let lse_without: Vec<f64> = (0..n).map(|i| lse_of(Some(i))).collect();
        let out = lse_without.iter().map(|l| l - lse).collect();
        self.push("log_one_minus_softmax", s, out, Op::LogOneMinusSoftmax { input: a, lse, lse_without }, &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let n = *s.last().unwrap();
        let src = self.data(a);
        let rows = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let mu = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        self.push("layer_norm", s, out, Op::LayerNorm { input: a, inv_std }, &[a])
    }

    /// Gathers rows of a `[V, d]` table; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-d, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::Domain("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dimension(format!("embedding id {bad} out of range {v}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push("embedding", vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Dimension(format!("target {bad} out of range {c}")));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[targets[r]];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        loss /= n as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        self.push("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Domain("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat: axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !ok {
                return Err(Error::Dimension(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let n = self.shape(i)[axis];
                out.extend_from_slice(&self.data(i)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where unclamped.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::Domain(format!("clamp bounds {lo} > {hi}")));
        }
        self.map("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn elementwise(&mut self, a: NodeId, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<NodeId> {
        let derivative: Vec<f64> = self.data(a).iter().map(|&x| df(x)).collect();
        check_finite("elementwise derivative", &derivative)?;
        self.map("elementwise", a, Op::Elementwise { input: a, derivative }, f)
    }

    /// Multiplies `x` (leading axis = batch) by one head's gate.
    ///
    /// `gates` is either `[H]`, shared across the batch, or `[B, H]`, one
    /// gate row per example.
    pub fn gate_scale(&mut self, x: NodeId, gates: NodeId, head: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gates).to_vec();
        let batch = xs[0];
        let per = self.value(x).len() / batch;
        let gd = self.data(gates);
        let factors: Vec<f64> = match gs.as_slice() {
            [h] if head < *h => vec![gd[head]; batch],
            [b, h] if *b == batch && head < *h => (0..batch).map(|i| gd[i * h + head]).collect(),
            _ => {
                return Err(Error::Dimension(format!(
                    "gate_scale: gates {gs:?}, head {head}, input {xs:?}"
                )))
            }
        };
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / per])
            .collect();
        self.push("gate_scale", xs, data, Op::GateScale { x, gates, head }, &[x, gates])
    }

    /// Reverse sweep from a scalar `loss`; fills `grad` on every trainable
    /// leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract("backward already ran; call zero_grad first".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.grad = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        let val = |id: NodeId| nodes[id.0].value.data();
        let needs = |id: NodeId| nodes[id.0].value.requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(id) {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    let m = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % m] += gi;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = bv.len();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i % m];
                    }
                });
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % m] += gi * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let sb = nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = nodes[a.0].value.len() / k;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| gemm_nt(g, bv, s, m, n, k));
                acc(*b, &mut |s| gemm_tn(av, g, s, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..bsz {
                        gemm_nt(&g[i * m * n..(i + 1) * m * n], &bv[i * k * n..(i + 1) * k * n], &mut s[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..bsz {
                        gemm_tn(&av[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], &mut s[i * k * n..(i + 1) * k * n], m, k, n);
                    }
                });
            }
            Op::Transpose(a) => {
                let s_in = nodes[a.0].value.shape();
                let r = s_in.len();
                let (rows, cols) = (s_in[r - 2], s_in[r - 1]);
                let batch = nodes[a.0].value.len() / (rows * cols);
                acc(*a, &mut |s| {
                    for b in 0..batch {
                        let off = b * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                s[off + i * cols + j] += g[off + j * rows + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Exp(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / av[i];
                    }
                })
            }
            Op::LogClamped(a, floor) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > *floor {
                            s[i] += g[i] / av[i];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |s| {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|x| *x += c)
            }),
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..n {
                            for j in 0..inner {
                                s[(o * n + i) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                })
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), *axis);
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                            for i in 0..n {
                                s[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogOneMinusSoftmax { input, lse, lse_without } => {
                // d out_h / d z_j = [j != h] exp(z_j - lse_without_h) - exp(z_j - lse)
                let z = nodes[input.0].value.data();
                let total: f64 = g.iter().sum();
                acc(*input, &mut |s| {
                    for (j, sj) in s.iter_mut().enumerate() {
                        let mut v = -total * (z[j] - lse).exp();
                        for (h, gh) in g.iter().enumerate() {
                            if h != j {
                                v += gh * (z[j] - lse_without[h]).exp();
                            }
                        }
                        *sj += v;
                    }
                })
            }
            Op::LayerNorm { input, inv_std } => {
                let n = *nodes[input.0].value.shape().last().unwrap();
                acc(*input, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let xh = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for i in 0..n {
                            s[r * n + i] += is * (gr[i] - mg - xh[i] * mgx);
                        }
                    }
                })
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - y);
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[idx].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &i in inputs {
                    let n = nodes[i.0].value.shape()[*axis];
                    acc(i, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut s[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * c;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > *lo && av[i] < *hi {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Elementwise { input, derivative } => acc(*input, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * derivative[i];
                }
            }),
            Op::GateScale { x, gates, head } => {
                let xv = val(*x);
                let gv = val(*gates);
                let gshape = nodes[gates.0].value.shape();
                let batch = nodes[x.0].value.shape()[0];
                let per = xv.len() / batch;
                let gate_index = |b: usize| match gshape {
                    [_] => *head,
                    [_, h] => b * h + head,
                    _ => unreachable!(),
                };
                acc(*x, &mut |s| {
                    for b in 0..batch {
                        let f = gv[gate_index(b)];
                        for i in b * per..(b + 1) * per {
                            s[i] += g[i] * f;
                        }
                    }
                });
                acc(*gates, &mut |s| {
                    for b in 0..batch {
                        let dot: f64 = (b * per..(b + 1) * per).map(|i| g[i] * xv[i]).sum();
                        s[gate_index(b)] += dot;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}
