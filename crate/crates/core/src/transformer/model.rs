use super::attention::{causal_mask, head_forward, HeadNodes, HeadWeights};
use super::config::{AttentionKind, ModelConfig, TaskKind};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gumbel::HeadMask;
use rand::Rng;

/// Index into a model's parameter list.
pub type ParamId = usize;

const LN_EPS: f64 = 1e-5;

/// Parameter ids of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// A head present in the model. `origin` is its flat index in the unpruned
/// architecture, `gate` its position in the current gate vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSlot {
    pub origin: usize,
    pub gate: usize,
    pub params: HeadParams,
}

#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub kind: AttentionKind,
    pub layer: usize,
    pub heads: Vec<HeadSlot>,
    norm: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionSublayer,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: AttentionSublayer,
    cross_attn: AttentionSublayer,
    ff: FeedForward,
}

/// Classification inputs: `batch` sequences of `len` tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyBatch {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

/// Teacher-forced sequence-to-sequence inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2seqBatch {
    pub src: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Classify(ClassifyBatch),
    Seq2seq(Seq2seqBatch),
}

impl Batch {
    pub fn size(&self) -> usize {
        match self {
            Batch::Classify(b) => b.batch,
            Batch::Seq2seq(b) => b.batch,
        }
    }
}

/// How head outputs are scaled during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Gates {
    /// Plain multi-head attention.
    Ones,
    /// `[H]` or per-example `[B, H]` gate node.
    Node(NodeId),
}

/// Parameter nodes of one model bound to a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    fn get(&self, p: ParamId) -> NodeId {
        self.ids[p]
    }
}

/// Toy Transformer with a gate on every attention head. Heads within a
/// sublayer are combined by summation of their output projections.
#[derive(Debug, Clone)]
pub struct GatedTransformer {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    tok_embed: ParamId,
    pos_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: (ParamId, ParamId),
    decoder: Vec<DecoderLayer>,
    dec_norm: Option<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
    head_count: usize,
}

enum Init {
    Uniform(f64),
    Const(f64),
}

struct Layout<'a> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    kept: &'a [bool],
    next_gate: usize,
}

impl Layout<'_> {
    fn alloc(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        self.alloc(name, &[fan_in, fan_out], Init::Uniform(bound))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.alloc(format!("{prefix}.norm.gain"), &[d], Init::Const(1.0)),
            self.alloc(format!("{prefix}.norm.bias"), &[d], Init::Const(0.0)),
        )
    }

    fn sublayer(&mut self, c: &ModelConfig, kind: AttentionKind, layer: usize, first_origin: usize) -> AttentionSublayer {
        let prefix = format!("{}.{layer}", kind.label());
        let norm = self.norm(&prefix, c.d_model);
        let (d, dk) = (c.d_model, c.head_dim());
        let mut heads = Vec::new();
        for h in 0..c.heads {
            let origin = first_origin + h;
            if !self.kept[origin] {
                continue;
            }
            let hp = format!("{prefix}.head{origin}");
            let params = HeadParams {
                wq: self.weight(format!("{hp}.wq"), d, dk),
                wk: self.weight(format!("{hp}.wk"), d, dk),
                wv: self.weight(format!("{hp}.wv"), d, dk),
                wo: self.weight(format!("{hp}.wo"), dk, d),
            };
            heads.push(HeadSlot { origin, gate: usize::MAX, params });
        }
        AttentionSublayer { kind, layer, heads, norm }
    }

    fn feed_forward(&mut self, prefix: &str, c: &ModelConfig) -> FeedForward {
        let (d, f) = (c.d_model, c.ff_dim());
        FeedForward {
            norm: self.norm(&format!("{prefix}.ff"), d),
            w1: self.weight(format!("{prefix}.ff.w1"), d, f),
            b1: self.alloc(format!("{prefix}.ff.b1"), &[f], Init::Const(0.0)),
            w2: self.weight(format!("{prefix}.ff.w2"), f, d),
            b2: self.alloc(format!("{prefix}.ff.b2"), &[d], Init::Const(0.0)),
        }
    }

    fn assign_gates(&mut self, sub: &mut AttentionSublayer) {
        for h in &mut sub.heads {
            h.gate = self.next_gate;
            self.next_gate += 1;
        }
    }
}

impl GatedTransformer {
    /// Randomly initialized model; deterministic for a given generator state.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let kept = vec![true; config.total_heads()];
        Self::assemble(config, &kept, |_, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-*b..*b)).collect(),
                Init::Const(v) => vec![*v; n],
            };
            Ok(Tensor::from_parts(shape.to_vec(), data))
        })
    }

    /// Lays out the architecture keeping the heads whose original flat index
    /// is set in `kept`, filling each parameter with `fill`.
    fn assemble<F>(config: ModelConfig, kept: &[bool], mut fill: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize], &Init) -> Result<Tensor>,
    {
        if kept.len() != config.total_heads() {
            return Err(Error::Contract(format!(
                "{} head flags for {} heads",
                kept.len(),
                config.total_heads()
            )));
        }
        let c = &config;
        let mut lay = Layout { names: Vec::new(), shapes: Vec::new(), inits: Vec::new(), kept, next_gate: 0 };
        let d = c.d_model;
        let tok_embed = lay.alloc("embed.tokens".into(), &[c.vocab, d], Init::Uniform(3f64.sqrt()));
        let pos_embed = lay.alloc("embed.positions".into(), &[c.max_len, d], Init::Uniform(3f64.sqrt()));
        let per = c.heads;
        let mut encoder = Vec::new();
        for l in 0..c.layers {
            let attn = lay.sublayer(c, AttentionKind::EncoderSelf, l, l * per);
            let ff = lay.feed_forward(&format!("encoder.{l}"), c);
            encoder.push(EncoderLayer { attn, ff });
        }
        let enc_norm = lay.norm("encoder.final", d);
        let mut decoder = Vec::new();
        let mut dec_norm = None;
        if c.task == TaskKind::Seq2seq {
            let dec_base = c.layers * per;
            let cross_base = dec_base + c.decoder_layers * per;
            for l in 0..c.decoder_layers {
                let self_attn = lay.sublayer(c, AttentionKind::DecoderSelf, l, dec_base + l * per);
                let cross_attn = lay.sublayer(c, AttentionKind::Cross, l, cross_base + l * per);
                let ff = lay.feed_forward(&format!("decoder.{l}"), c);
                decoder.push(DecoderLayer { self_attn, cross_attn, ff });
            }
            dec_norm = Some(lay.norm("decoder.final", d));
        }
        let outputs = match c.task {
            TaskKind::Classifier => c.classes,
            TaskKind::Seq2seq => c.vocab,
        };
        let out_w = lay.weight("output.w".into(), d, outputs);
        let out_b = lay.alloc("output.b".into(), &[outputs], Init::Const(0.0));

        // Gate order follows the flat head order: encoder self, decoder
        // self, then cross attention.
        for layer in &mut encoder {
            lay.assign_gates(&mut layer.attn);
        }
        for layer in &mut decoder {
            lay.assign_gates(&mut layer.self_attn);
        }
        for layer in &mut decoder {
            lay.assign_gates(&mut layer.cross_attn);
        }
        let head_count = lay.next_gate;

        let mut params = Vec::with_capacity(lay.names.len());
        for ((name, shape), init) in lay.names.iter().zip(&lay.shapes).zip(&lay.inits) {
            let t = fill(name, shape, init)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            params.push(t);
        }
        Ok(GatedTransformer {
            config,
            names: lay.names,
            params,
            tok_embed,
            pos_embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
            head_count,
        })
    }

    /// Rebuilds a model from named tensors, keeping the heads whose
    /// original index is set in `kept`.
    pub fn from_named(config: ModelConfig, kept: &[bool], tensors: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let model = Self::assemble(config, kept, |name, _, _| {
            lookup
                .get(name)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        })?;
        if model.params.len() != tensors.len() {
            return Err(Error::Format(format!(
                "{} tensors supplied, architecture has {}",
                tensors.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Heads currently present (the gate vector length).
    pub fn head_count(&self) -> usize {
        self.head_count
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn attention_param_count(&self) -> usize {
        self.head_slots()
            .iter()
            .map(|(_, h)| {
                [h.params.wq, h.params.wk, h.params.wv, h.params.wo]
                    .iter()
                    .map(|&p| self.params[p].len())
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    fn sublayers(&self) -> Vec<&AttentionSublayer> {
        let mut out: Vec<&AttentionSublayer> = self.encoder.iter().map(|l| &l.attn).collect();
        out.extend(self.decoder.iter().map(|l| &l.self_attn));
        out.extend(self.decoder.iter().map(|l| &l.cross_attn));
        out
    }

    /// Attention sublayers in flat-index order.
    pub fn attention_sublayers(&self) -> Vec<AttentionSublayer> {
        self.sublayers().into_iter().cloned().collect()
    }

    /// `(kind/layer, slot)` for every present head in gate order.
    pub fn head_slots(&self) -> Vec<((AttentionKind, usize), HeadSlot)> {
        let mut out: Vec<_> = self
            .sublayers()
            .into_iter()
            .flat_map(|s| s.heads.iter().map(move |h| ((s.kind, s.layer), h.clone())))
            .collect();
        out.sort_by_key(|(_, h)| h.gate);
        out
    }

    /// Original flat indices of the present heads, in gate order.
    pub fn head_origins(&self) -> Vec<usize> {
        self.head_slots().into_iter().map(|(_, h)| h.origin).collect()
    }

    pub fn head_weights(&self, gate: usize) -> Result<HeadWeights> {
        let (_, slot) = self
            .head_slots()
            .into_iter()
            .find(|(_, h)| h.gate == gate)
            .ok_or_else(|| Error::Dimension(format!("no head at gate index {gate}")))?;
        let p = slot.params;
        HeadWeights::new(
            self.params[p.wq].clone(),
            self.params[p.wk].clone(),
            self.params[p.wv].clone(),
            self.params[p.wo].clone(),
        )
    }

    /// Parameter ids of the head at `gate`.
    pub fn head_params(&self, gate: usize) -> Option<HeadParams> {
        self.head_slots().into_iter().find(|(_, h)| h.gate == gate).map(|(_, h)| h.params)
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let ids = self
            .params
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = trainable;
                tape.leaf(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { ids })
    }

    /// Physically removes the heads whose gate is 0 in `mask`.
    pub fn compact(&self, mask: &HeadMask) -> Result<GatedTransformer> {
        if mask.len() != self.head_count {
            return Err(Error::Contract(format!(
                "mask of length {} for {} heads",
                mask.len(),
                self.head_count
            )));
        }
        let mut kept = vec![false; self.config.total_heads()];
        for (_, slot) in self.head_slots() {
            kept[slot.origin] = mask.is_kept(slot.gate);
        }
        let named = self.named_params();
        let lookup: std::collections::HashMap<&str, &Tensor> =
            named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        Self::assemble(self.config.clone(), &kept, |name, _, _| {
            lookup
                .get(name)
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Contract(format!("parameter {name} vanished during compaction")))
        })
    }

    /// Original-index keep flags of the present heads.
    pub fn kept_origins(&self) -> Vec<bool> {
        let mut kept = vec![false; self.config.total_heads()];
        for o in self.head_origins() {
            kept[o] = true;
        }
        kept
    }

    /// Model view whose forwards scale each head by `gates`.
    pub fn with_gates(&self, gates: &[f64]) -> Result<GatedView<'_>> {
        if gates.len() != self.head_count {
            return Err(Error::Contract(format!(
                "{} gates for {} heads",
                gates.len(),
                self.head_count
            )));
        }
        Ok(GatedView { model: self, gates: gates.to_vec() })
    }

    pub fn with_mask(&self, mask: &HeadMask) -> Result<GatedView<'_>> {
        self.with_gates(&mask.as_gates())
    }

    fn check_gates(&self, tape: &Tape, gates: Gates, batch: usize) -> Result<()> {
        if let Gates::Node(g) = gates {
            let s = tape.shape(g);
            let ok = match s {
                [h] => *h == self.head_count,
                [b, h] => *b == batch && *h == self.head_count,
                _ => false,
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "gate shape {s:?} for {} heads, batch {batch}",
                    self.head_count
                )));
            }
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, norm: (ParamId, ParamId), x: NodeId) -> Result<NodeId> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let n = tape.mul_broadcast(n, p.get(norm.0))?;
        tape.add_broadcast(n, p.get(norm.1))
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, tokens: &[usize], batch: usize, len: usize) -> Result<NodeId> {
        if len > self.config.max_len {
            return Err(Error::Dimension(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if tokens.len() != batch * len {
            return Err(Error::Dimension(format!("{} tokens for {batch} x {len}", tokens.len())));
        }
        let tok = tape.embedding(p.get(self.tok_embed), tokens)?;
        let tok = tape.reshape(tok, &[batch, len, self.config.d_model])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(p.get(self.pos_embed), &positions)?;
        tape.add_broadcast(tok, pos)
    }

    /// Gated sum of a sublayer's heads, or `None` when it has no heads.
    fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gates: Gates,
        sub: &AttentionSublayer,
        xq: NodeId,
        xkv: NodeId,
        mask: Option<NodeId>,
    ) -> Result<Option<NodeId>> {
        let mut total: Option<NodeId> = None;
        for slot in &sub.heads {
            let hp = slot.params;
            let nodes = HeadNodes { wq: p.get(hp.wq), wk: p.get(hp.wk), wv: p.get(hp.wv), wo: p.get(hp.wo) };
            let mut out = head_forward(tape, nodes, xq, xkv, mask)?;
            if let Gates::Node(g) = gates {
                out = tape.gate_scale(out, g, slot.gate)?;
            }
            total = Some(match total {
                None => out,
                Some(t) => tape.add(t, out)?,
            });
        }
        Ok(total)
    }

    fn residual_attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gates: Gates,
        sub: &AttentionSublayer,
        x: NodeId,
        memory: Option<NodeId>,
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        if sub.heads.is_empty() {
            return Ok(x);
        }
        let n = self.norm(tape, p, sub.norm, x)?;
        let kv = memory.unwrap_or(n);
        match self.attend(tape, p, gates, sub, n, kv, mask)? {
            Some(a) => tape.add(x, a),
            None => Ok(x),
        }
    }

    fn residual_ff(&self, tape: &mut Tape, p: &Bound, ff: &FeedForward, x: NodeId) -> Result<NodeId> {
        let n = self.norm(tape, p, ff.norm, x)?;
        let h = tape.matmul(n, p.get(ff.w1))?;
        let h = tape.add_broadcast(h, p.get(ff.b1))?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p.get(ff.w2))?;
        let o = tape.add_broadcast(o, p.get(ff.b2))?;
        tape.add(x, o)
    }

    /// Encoder states `[B, T, d]` after the final norm.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, gates: Gates, tokens: &[usize], batch: usize, len: usize) -> Result<NodeId> {
        self.check_gates(tape, gates, batch)?;
        let mut x = self.embed(tape, p, tokens, batch, len)?;
        for layer in &self.encoder {
            x = self.residual_attention(tape, p, gates, &layer.attn, x, None, None)?;
            x = self.residual_ff(tape, p, &layer.ff, x)?;
        }
        self.norm(tape, p, self.enc_norm, x)
    }

    /// Decoder logits `[B, T, V]` for teacher-forced inputs.
    pub fn decode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        gates: Gates,
        memory: NodeId,
        tgt_in: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<NodeId> {
        let dec_norm = self
            .dec_norm
            .ok_or_else(|| Error::Contract("decode called on a classifier".into()))?;
        self.check_gates(tape, gates, batch)?;
        let mut x = self.embed(tape, p, tgt_in, batch, len)?;
        let mask = causal_mask(tape, len, len)?;
        for layer in &self.decoder {
            x = self.residual_attention(tape, p, gates, &layer.self_attn, x, None, Some(mask))?;
            x = self.residual_attention(tape, p, gates, &layer.cross_attn, x, Some(memory), None)?;
            x = self.residual_ff(tape, p, &layer.ff, x)?;
        }
        let x = self.norm(tape, p, dec_norm, x)?;
        let logits = tape.matmul(x, p.get(self.out_w))?;
        tape.add_broadcast(logits, p.get(self.out_b))
    }

    /// Task logits: `[B, classes]` or `[B, T, V]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, gates: Gates, batch: &Batch) -> Result<NodeId> {
        match (self.config.task, batch) {
            (TaskKind::Classifier, Batch::Classify(b)) => {
                let h = self.encode(tape, p, gates, &b.tokens, b.batch, b.len)?;
                let pooled = tape.mean_axis(h, 1)?;
                let logits = tape.matmul(pooled, p.get(self.out_w))?;
                tape.add_broadcast(logits, p.get(self.out_b))
            }
            (TaskKind::Seq2seq, Batch::Seq2seq(b)) => {
                let mem = self.encode(tape, p, gates, &b.src, b.batch, b.src_len)?;
                self.decode(tape, p, gates, mem, &b.tgt_in, b.batch, b.tgt_len)
            }
            _ => Err(Error::Contract("batch kind does not match the model task".into())),
        }
    }

    /// Mean cross-entropy over examples (and target positions).
    pub fn loss(&self, tape: &mut Tape, p: &Bound, gates: Gates, batch: &Batch) -> Result<NodeId> {
        let logits = self.logits(tape, p, gates, batch)?;
        match batch {
            Batch::Classify(b) => tape.cross_entropy(logits, &b.labels),
            Batch::Seq2seq(b) => {
                let flat = tape.reshape(logits, &[b.batch * b.tgt_len, self.config.vocab])?;
                tape.cross_entropy(flat, &b.tgt_out)
            }
        }
    }

    /// Inserts a constant `[H]` gate node.
    pub fn constant_gates(&self, tape: &mut Tape, gates: &[f64]) -> Result<Gates> {
        if gates.len() != self.head_count {
            return Err(Error::Contract(format!("{} gates for {} heads", gates.len(), self.head_count)));
        }
        Ok(Gates::Node(tape.constant(Tensor::new(&[gates.len()], gates.to_vec())?)?))
    }
}

/// A model paired with fixed gate values.
#[derive(Debug, Clone)]
pub struct GatedView<'a> {
    pub model: &'a GatedTransformer,
    pub gates: Vec<f64>,
}

impl GatedView<'_> {
    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, false)?;
        let g = self.model.constant_gates(&mut tape, &self.gates)?;
        let l = self.model.loss(&mut tape, &p, g, batch)?;
        Ok(tape.value(l).item())
    }

    pub fn logits_value(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, false)?;
        let g = self.model.constant_gates(&mut tape, &self.gates)?;
        let l = self.model.logits(&mut tape, &p, g, batch)?;
        Ok(tape.value(l).clone())
    }

    /// Loss and its gradient with respect to each gate.
    pub fn gate_gradient(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, false)?;
        let g = tape.param(Tensor::new(&[self.gates.len()], self.gates.clone())?)?;
        let l = self.model.loss(&mut tape, &p, Gates::Node(g), batch)?;
        tape.backward(l)?;
        let grad = tape.grad(g).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.gates.len()]);
        Ok((tape.value(l).item(), grad))
    }
}

impl GatedTransformer {
    /// Ungated loss value.
    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let l = self.loss(&mut tape, &p, Gates::Ones, batch)?;
        Ok(tape.value(l).item())
    }

    pub fn logits_value(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let l = self.logits(&mut tape, &p, Gates::Ones, batch)?;
        Ok(tape.value(l).clone())
    }
}
