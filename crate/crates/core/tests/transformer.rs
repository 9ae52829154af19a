use headprune::autodiff::{gradient_check, Tape, Tensor};
use headprune::gumbel::HeadMask;
use headprune::rng::seeded;
use headprune::transformer::{
    apply_gates, attention_head_forward, compact, gated_multihead_forward, AttentionKind, Batch, Checkpoint,
    ClassifyBatch, GatedTransformer, Gates, HeadWeights, ModelConfig, Seq2seqBatch,
};
use rand::Rng;

fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_head(d: usize, dk: usize, rng: &mut impl Rng) -> HeadWeights {
    HeadWeights::new(
        rand_matrix(d, dk, rng),
        rand_matrix(d, dk, rng),
        rand_matrix(d, dk, rng),
        rand_matrix(dk, d, rng),
    )
    .unwrap()
}

fn rand_seq(t: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Row-vector `v * M`.
fn vecmat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| v[i] * m.data()[i * c + j]).sum()).collect()
}

/// Straight-line attention: scores (q Wq).(z_t Wk) / sqrt(dk), softmax over
/// t, weighted sum of z_t Wv, projected by Wo.
fn reference_attention(h: &HeadWeights, z: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let dk = h.head_dim() as f64;
    let qp = vecmat(q, &h.wq);
    let scores: Vec<f64> = z
        .iter()
        .map(|zt| vecmat(zt, &h.wk).iter().zip(&qp).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z_sum: f64 = e.iter().sum();
    let mut mixed = vec![0.0; h.head_dim()];
    for (zt, ei) in z.iter().zip(&e) {
        for (acc, v) in mixed.iter_mut().zip(vecmat(zt, &h.wv)) {
            *acc += ei / z_sum * v;
        }
    }
    vecmat(&mixed, &h.wo)
}

#[test]
fn single_token_attention_is_value_projection() {
    let mut rng = seeded(1);
    let head = rand_head(6, 3, &mut rng);
    let z = rand_seq(1, 6, &mut rng);
    let expect = vecmat(&vecmat(&z[0], &head.wv), &head.wo);
    for _ in 0..3 {
        let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let out = attention_head_forward(&head, &z, &q).unwrap();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_query_projection_gives_uniform_weights() {
    let mut rng = seeded(2);
    let mut head = rand_head(5, 5, &mut rng);
    head.wq = Tensor::zeros(&[5, 5]);
    let z = rand_seq(4, 5, &mut rng);
    let q = vec![1.0; 5];
    let out = attention_head_forward(&head, &z, &q).unwrap();
    let mut mean = vec![0.0; 5];
    for zt in &z {
        for (m, v) in mean.iter_mut().zip(vecmat(zt, &head.wv)) {
            *m += v / 4.0;
        }
    }
    let expect = vecmat(&mean, &head.wo);
    for (a, b) in out.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn attention_matches_straight_line_reference() {
    let mut rng = seeded(3);
    for trial in 0..20 {
        let (d, dk, t) = (4 + trial % 5, 1 + trial % 4, 1 + trial % 7);
        let head = rand_head(d, dk, &mut rng);
        let z = rand_seq(t, d, &mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = attention_head_forward(&head, &z, &q).unwrap();
        let expect = reference_attention(&head, &z, &q);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn attention_errors() {
    let mut rng = seeded(4);
    let head = rand_head(4, 2, &mut rng);
    assert!(attention_head_forward(&head, &[], &[0.0; 4]).is_err());
    let z = rand_seq(3, 4, &mut rng);
    assert!(gated_multihead_forward(&[head.clone(), head.clone()], &[1.0], &z, &[0.0; 4]).is_err());
    assert!(attention_head_forward(&head, &z, &[0.0; 3]).is_err());
}

#[test]
fn gated_multihead_cases() {
    let mut rng = seeded(5);
    let heads: Vec<HeadWeights> = (0..3).map(|_| rand_head(6, 2, &mut rng)).collect();
    let z = rand_seq(5, 6, &mut rng);
    let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let per_head: Vec<Vec<f64>> = heads.iter().map(|h| attention_head_forward(h, &z, &q).unwrap()).collect();

    let mut ungated = vec![0.0; 6];
    for out in &per_head {
        for (a, v) in ungated.iter_mut().zip(out) {
            *a += v;
        }
    }
    assert_eq!(gated_multihead_forward(&heads, &[1.0; 3], &z, &q).unwrap(), ungated);
    assert!(gated_multihead_forward(&heads, &[0.0; 3], &z, &q).unwrap().iter().all(|&v| v == 0.0));
    for j in 0..3 {
        let mut g = [0.0; 3];
        g[j] = 1.0;
        let out = gated_multihead_forward(&heads, &g, &z, &q).unwrap();
        for (a, b) in out.iter().zip(&per_head[j]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn classifier(seed: u64, d: usize, layers: usize, heads: usize) -> GatedTransformer {
    GatedTransformer::build(ModelConfig::classifier(layers, heads, d, 7, 6), &mut seeded(seed)).unwrap()
}

fn seq2seq(seed: u64) -> GatedTransformer {
    GatedTransformer::build(ModelConfig::seq2seq(2, 2, 4, 16, 9, 6), &mut seeded(seed)).unwrap()
}

fn classify_batch(rng: &mut impl Rng, batch: usize, len: usize) -> Batch {
    Batch::Classify(ClassifyBatch {
        tokens: (0..batch * len).map(|_| rng.gen_range(0..7)).collect(),
        labels: (0..batch).map(|_| rng.gen_range(0..2)).collect(),
        batch,
        len,
    })
}

fn seq_batch(rng: &mut impl Rng, batch: usize, len: usize) -> Seq2seqBatch {
    Seq2seqBatch {
        src: (0..batch * len).map(|_| rng.gen_range(0..9)).collect(),
        tgt_in: (0..batch * len).map(|_| rng.gen_range(0..9)).collect(),
        tgt_out: (0..batch * len).map(|_| rng.gen_range(0..9)).collect(),
        batch,
        src_len: len,
        tgt_len: len,
    }
}

#[test]
fn build_is_deterministic_and_counts_heads() {
    let a = classifier(7, 32, 2, 4);
    let b = classifier(7, 32, 2, 4);
    assert_eq!(a.params(), b.params());
    assert_eq!(a.head_count(), 8);
    assert_ne!(classifier(8, 32, 2, 4).params(), a.params());
    let s = GatedTransformer::build(ModelConfig::seq2seq(2, 2, 4, 64, 10, 16), &mut seeded(1)).unwrap();
    assert_eq!(s.head_count(), 24);
    let kinds: Vec<AttentionKind> = s.head_slots().iter().map(|((k, _), _)| *k).collect();
    assert_eq!(kinds.iter().filter(|k| **k == AttentionKind::Cross).count(), 8);
    assert_eq!(kinds[8], AttentionKind::DecoderSelf);
}

#[test]
fn all_ones_gates_are_identity() {
    let model = seq2seq(9);
    let batch = Batch::Seq2seq(seq_batch(&mut seeded(10), 3, 5));
    let plain = model.logits_value(&batch).unwrap();
    let gated = apply_gates(&model, &vec![1.0; model.head_count()]).unwrap().logits_value(&batch).unwrap();
    assert_eq!(plain, gated);
    assert!(apply_gates(&model, &[1.0; 3]).is_err());
}

#[test]
fn masked_equals_compacted() {
    let model = seq2seq(11);
    let mut rng = seeded(12);
    let batch = Batch::Seq2seq(seq_batch(&mut rng, 2, 5));
    for _ in 0..20 {
        let mask = HeadMask::new((0..24).map(|_| rng.gen_bool(0.5)).collect());
        let masked = model.with_mask(&mask).unwrap().logits_value(&batch).unwrap();
        let small = compact(&model, &mask).unwrap();
        assert_eq!(small.head_count(), mask.count());
        let out = small.logits_value(&batch).unwrap();
        assert!(masked.max_abs_diff(&out) < 1e-6);
        let removed = 24 - mask.count();
        assert_eq!(model.param_count() - small.param_count(), removed * 4 * 16 * 4);
    }
}

#[test]
fn compaction_sizes() {
    let model = classifier(13, 32, 2, 4);
    let same = model.compact(&HeadMask::all(8)).unwrap();
    assert_eq!(same.param_count(), model.param_count());
    assert_eq!(same.params(), model.params());
    let half = model.compact(&HeadMask::from_indices(8, &[0, 2, 5, 7]).unwrap()).unwrap();
    assert_eq!(half.attention_param_count() * 2, model.attention_param_count());
    assert_eq!(half.head_origins(), vec![0, 2, 5, 7]);
    // Compaction composes: removing heads from an already compacted model.
    let quarter = half.compact(&HeadMask::from_indices(4, &[1, 3]).unwrap()).unwrap();
    assert_eq!(quarter.head_origins(), vec![2, 7]);
    let empty = model.compact(&HeadMask::none(8)).unwrap();
    assert_eq!(empty.head_count(), 0);
    assert_eq!(empty.attention_param_count(), 0);
    let batch = classify_batch(&mut seeded(14), 2, 4);
    let masked = model.with_mask(&HeadMask::none(8)).unwrap().loss_value(&batch).unwrap();
    assert!((empty.loss_value(&batch).unwrap() - masked).abs() < 1e-9);
}

#[test]
fn decoder_is_causal() {
    let model = seq2seq(15);
    let base = seq_batch(&mut seeded(16), 1, 6);
    let logits = model.logits_value(&Batch::Seq2seq(base.clone())).unwrap();
    let vocab = 9;
    for t in 0..5 {
        let mut edited = base.clone();
        for later in t + 1..6 {
            edited.tgt_in[later] = (edited.tgt_in[later] + 3) % vocab;
        }
        let out = model.logits_value(&Batch::Seq2seq(edited)).unwrap();
        for pos in 0..=t {
            let a = &logits.data()[pos * vocab..(pos + 1) * vocab];
            let b = &out.data()[pos * vocab..(pos + 1) * vocab];
            assert_eq!(a, b, "position {pos} changed after editing > {t}");
        }
    }
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let model = classifier(17, 16, 2, 2);
    let batch = classify_batch(&mut seeded(18), 3, 5);
    let gates = Tensor::vector(vec![0.9, 0.3, 1.2, 0.6]).unwrap();
    let check = gradient_check(
        |t, g| {
            let p = model.bind(t, false)?;
            model.loss(t, &p, Gates::Node(g), &batch)
        },
        &gates,
        1e-5,
    )
    .unwrap();
    assert!(check.max_relative_error() < 1e-4, "{:?}", check);
}

/// Every parameter tensor and the gates of a d = 8, one-layer model against
/// central differences.
fn end_to_end_gradients(model: &GatedTransformer, batch: &Batch) -> f64 {
    let gates = Tensor::vector((0..model.head_count()).map(|h| 0.5 + 0.1 * h as f64).collect()).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let check = gradient_check(
            |t, x| {
                let mut p = model.bind(t, false)?;
                p.ids[i] = x;
                let g = t.constant(gates.clone())?;
                model.loss(t, &p, Gates::Node(g), batch)
            },
            &model.params()[i],
            1e-5,
        )
        .unwrap();
        worst = worst.max(check.max_relative_error_floored(1e-6));
    }
    let check = gradient_check(
        |t, g| {
            let p = model.bind(t, false)?;
            model.loss(t, &p, Gates::Node(g), batch)
        },
        &gates,
        1e-5,
    )
    .unwrap();
    worst.max(check.max_relative_error_floored(1e-6))
}

#[test]
fn classifier_gradients_end_to_end() {
    let model = classifier(19, 8, 1, 2);
    let batch = classify_batch(&mut seeded(20), 2, 4);
    let err = end_to_end_gradients(&model, &batch);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn seq2seq_gradients_end_to_end() {
    let model = GatedTransformer::build(ModelConfig::seq2seq(1, 1, 2, 8, 5, 4), &mut seeded(21)).unwrap();
    let mut rng = seeded(22);
    let batch = Batch::Seq2seq(Seq2seqBatch {
        src: (0..8).map(|_| rng.gen_range(0..5)).collect(),
        tgt_in: (0..8).map(|_| rng.gen_range(0..5)).collect(),
        tgt_out: (0..8).map(|_| rng.gen_range(0..5)).collect(),
        batch: 2,
        src_len: 4,
        tgt_len: 4,
    });
    let err = end_to_end_gradients(&model, &batch);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn per_example_gates_split_the_gradient() {
    let model = classifier(23, 8, 1, 2);
    let mut rng = seeded(24);
    let Batch::Classify(b) = classify_batch(&mut rng, 3, 4) else { unreachable!() };
    // Sum of per-example losses with [B, H] gates vs one example at a time.
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false).unwrap();
    let g = tape.param(Tensor::filled(&[3, 2], 1.0)).unwrap();
    let l = model.loss(&mut tape, &p, Gates::Node(g), &Batch::Classify(b.clone())).unwrap();
    let l = tape.scale(l, 3.0).unwrap();
    tape.backward(l).unwrap();
    let per_example = tape.grad(g).unwrap().to_vec();
    for m in 0..3 {
        let single = Batch::Classify(ClassifyBatch {
            tokens: b.tokens[m * 4..(m + 1) * 4].to_vec(),
            labels: vec![b.labels[m]],
            batch: 1,
            len: 4,
        });
        let (_, grad) = model.with_gates(&[1.0, 1.0]).unwrap().gate_gradient(&single).unwrap();
        for h in 0..2 {
            assert!((grad[h] - per_example[m * 2 + h]).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let model = seq2seq(25).compact(&HeadMask::new((0..24).map(|i| i % 3 != 0).collect())).unwrap();
    let mask = HeadMask::new((0..16).map(|i| i % 2 == 0).collect());
    let ck = Checkpoint::new(model.clone(), mask.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"magic\":\"HPLAB1\""));
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.mask, mask);
    assert_eq!(back.model.params(), model.params());
    assert_eq!(back.model.head_origins(), model.head_origins());
    let bad = text.replace("HPLAB1", "HPLAB0");
    assert!(Checkpoint::from_json(&bad).is_err());
    assert!(Checkpoint::new(model, HeadMask::all(3)).is_err());
}
