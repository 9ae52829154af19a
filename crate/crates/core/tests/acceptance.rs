//! Acceptance criteria A1-A12. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; the process fails if any criterion does.

use headprune::autodiff::{gradient_check, Tensor};
use headprune::gumbel::{hard_top_k, sample_gumbel, soft_top_k, soft_top_k_node, HeadMask, TemperatureSchedule};
use headprune::harness::bench::median;
use headprune::harness::{
    bench_speedup, holds_final, make_splits, masks_at_fractions, oracle_check, run_cell, track_dynamics,
    BenchSettings, CellResult, DenseCache, ExperimentConfig,
};
use headprune::pruners::{hard_concrete_gate, ste_step_with_noise, HardConcrete, Method};
use headprune::rng::seeded;
use headprune::transformer::{Batch, ClassifyBatch, GatedTransformer, Gates, ModelConfig, Seq2seqBatch};
use rand::Rng;
use std::path::PathBuf;
use std::time::{Duration, Instant};

const A1_TOL: f64 = 1e-9;
const A1_BUDGET: Duration = Duration::from_secs(5);
const A2_TOL: f64 = 1e-3;
const A2_GAP: f64 = 0.1;
const A3_TV: f64 = 0.01;
const A3_BUDGET: Duration = Duration::from_secs(30);
const A4_REL: f64 = 1e-4;
const A5_REL: f64 = 1e-3;
const A6_TOL: f64 = 1e-6;
const A7_UNPRUNED_MIN: f64 = 0.95;
const A7_GAP: f64 = 0.02;
const A7_BUDGET: Duration = Duration::from_secs(30 * 60);
const A8_TOL: f64 = 0.01;
const A9_TOL: f64 = 1e-6;
const A10_TOL: f64 = 1e-12;
const A12_WINDOW: f64 = 0.2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn a1_gate_sum() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(101);
    let taus = [10.0, 1.0, 0.1, 1e-3];
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let h = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=h);
        let w: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let noise = sample_gumbel(h, &mut rng).unwrap();
        let r: Vec<f64> = w.iter().zip(noise.values()).map(|(a, b)| a + b).collect();
        let g = soft_top_k(&r, k, taus[trial % 4]).unwrap();
        worst = worst.max((g.sum() - k as f64).abs());
    }
    let took = start.elapsed();
    verdict(worst < A1_TOL && took < A1_BUDGET, format!("max |sum g - K| = {worst:.2e}, {took:.2?}"))
}

fn a2_hard_limit() -> Verdict {
    let mut rng = seeded(202);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 500 {
        let h = rng.gen_range(2..=16);
        let k = rng.gen_range(1..h);
        let w: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let noise = sample_gumbel(h, &mut rng).unwrap();
        let r: Vec<f64> = w.iter().zip(noise.values()).map(|(a, b)| a + b).collect();
        let mut sorted = r.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[k - 1] - sorted[k] <= A2_GAP {
            continue;
        }
        let soft = soft_top_k(&r, k, 1e-6).unwrap();
        let hard = hard_top_k(&r, k).unwrap().as_gates();
        for (s, h) in soft.gates.iter().zip(&hard) {
            worst = worst.max((s - h).abs());
        }
        trials += 1;
    }
    verdict(worst < A2_TOL, format!("max |soft - hard| = {worst:.2e} over {trials} trials"))
}

fn a3_sampling() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(303);
    let iota: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..3.0)).collect();
    let random = oracle_check(&iota, 2, 200_000, 31).unwrap();
    let fixed = oracle_check(&[1.0, 2.0, 3.0], 2, 200_000, 32).unwrap();
    let (emp, exact) = fixed.frequency_of("011").unwrap();
    let took = start.elapsed();
    let pass = random.tv_distance < A3_TV
        && (exact - 7.0 / 12.0).abs() < 1e-12
        && (emp - 7.0 / 12.0).abs() < A3_TV
        && took < A3_BUDGET;
    verdict(
        pass,
        format!(
            "TV = {:.4} (H=5, K=2); P({{2,3}}) empirical {emp:.4} exact {exact:.6} vs 7/12; {took:.2?}",
            random.tv_distance
        ),
    )
}

fn a4_relaxation_gradients() -> Verdict {
    let mut rng = seeded(404);
    let mut worst: f64 = 0.0;
    for tau in [0.5, 1.0, 5.0] {
        for _ in 0..10 {
            let h = rng.gen_range(2..=8);
            let k = rng.gen_range(1..h);
            let noise = sample_gumbel(h, &mut rng).unwrap().0;
            let c: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::vector((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let check = gradient_check(
                |t, w| {
                    let n = t.constant(Tensor::vector(noise.clone())?)?;
                    let r = t.add(w, n)?;
                    let g = soft_top_k_node(t, r, k, tau)?.gates;
                    let c = t.constant(Tensor::vector(c.clone())?)?;
                    let p = t.mul(g, c)?;
                    t.sum(p)
                },
                &w,
                1e-6,
            )
            .unwrap();
            worst = worst.max(check.max_relative_error_floored(1e-8));
        }
    }
    verdict(worst < A4_REL, format!("max relative error {worst:.2e}"))
}

fn model_gradient_error(model: &GatedTransformer, batch: &Batch) -> f64 {
    let gates = Tensor::vector((0..model.head_count()).map(|h| 0.6 + 0.15 * h as f64).collect()).unwrap();
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

fn a5_model_gradients() -> Verdict {
    let mut rng = seeded(505);
    let cls = GatedTransformer::build(ModelConfig::classifier(1, 2, 8, 6, 5), &mut rng).unwrap();
    let cls_batch = Batch::Classify(ClassifyBatch {
        tokens: (0..10).map(|_| rng.gen_range(0..6)).collect(),
        labels: vec![0, 1],
        batch: 2,
        len: 5,
    });
    let s2s = GatedTransformer::build(ModelConfig::seq2seq(1, 1, 2, 8, 6, 4), &mut rng).unwrap();
    let s2s_batch = Batch::Seq2seq(Seq2seqBatch {
        src: (0..8).map(|_| rng.gen_range(0..6)).collect(),
        tgt_in: (0..8).map(|_| rng.gen_range(0..6)).collect(),
        tgt_out: (0..8).map(|_| rng.gen_range(0..6)).collect(),
        batch: 2,
        src_len: 4,
        tgt_len: 4,
    });
    let a = model_gradient_error(&cls, &cls_batch);
    let b = model_gradient_error(&s2s, &s2s_batch);
    verdict(a.max(b) < A5_REL, format!("max relative error: classifier {a:.2e}, encoder-decoder {b:.2e}"))
}

fn random_seq2seq_batch(rng: &mut impl Rng, vocab: usize, len: usize, b: usize) -> Batch {
    Batch::Seq2seq(Seq2seqBatch {
        src: (0..b * len).map(|_| rng.gen_range(0..vocab)).collect(),
        tgt_in: (0..b * len).map(|_| rng.gen_range(0..vocab)).collect(),
        tgt_out: (0..b * len).map(|_| rng.gen_range(0..vocab)).collect(),
        batch: b,
        src_len: len,
        tgt_len: len,
    })
}

fn a6_compaction() -> Verdict {
    let mut rng = seeded(606);
    let model = GatedTransformer::build(ModelConfig::seq2seq(2, 2, 4, 16, 9, 6), &mut rng).unwrap();
    let h = model.head_count();
    let mut worst: f64 = 0.0;
    let mut sizes_ok = true;
    for _ in 0..100 {
        let mask = HeadMask::new((0..h).map(|_| rng.gen_bool(0.5)).collect());
        let batch = random_seq2seq_batch(&mut rng, 9, 6, 2);
        let masked = model.with_mask(&mask).unwrap().logits_value(&batch).unwrap();
        let small = model.compact(&mask).unwrap();
        worst = worst.max(small.logits_value(&batch).unwrap().max_abs_diff(&masked));
        // Remove the kept heads one at a time: every removal must shrink the model.
        let mut m = mask.clone();
        let mut last = small.param_count();
        if mask.count() < h && last >= model.param_count() {
            sizes_ok = false;
        }
        for head in mask.kept() {
            m.set(head, false);
            let n = model.compact(&m).unwrap().param_count();
            sizes_ok &= n < last;
            last = n;
        }
    }
    verdict(
        worst < A6_TOL && sizes_ok,
        format!("max |masked - compacted| = {worst:.2e}; parameter count strictly decreasing: {sizes_ok}"),
    )
}

fn a8_hard_concrete() -> Verdict {
    let hc = HardConcrete::default();
    let mut rng = seeded(808);
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for phi in [-4.0, 0.0, 4.0] {
        let n = 100_000;
        let mc = (0..n).filter(|_| hard_concrete_gate(phi, &hc, &mut rng) > 0.0).count() as f64 / n as f64;
        let exact = hc.prob_nonzero(phi);
        worst = worst.max((mc - exact).abs());
        parts.push(format!("phi {phi}: MC {mc:.4} closed form {exact:.4}"));
    }
    verdict(worst < A8_TOL, format!("{}; max abs error {worst:.4}", parts.join(", ")))
}

fn a9_ste_contract() -> Verdict {
    let mut rng = seeded(909);
    let model = GatedTransformer::build(ModelConfig::seq2seq(1, 1, 3, 12, 7, 5), &mut rng).unwrap();
    let h = model.head_count();
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..20 {
        let k = rng.gen_range(1..=h);
        let w: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let noise = sample_gumbel(h, &mut rng).unwrap();
        let batch = random_seq2seq_batch(&mut rng, 7, 5, 3);
        let step = ste_step_with_noise(&model, &w, k, &batch, &noise, true).unwrap();
        let mask = HeadMask::new(step.gates.iter().map(|&g| g == 1.0).collect());
        let compacted = model.compact(&mask).unwrap().loss_value(&batch).unwrap();
        worst = worst.max((step.loss - compacted).abs());
        let (_, dg) = model.with_mask(&mask).unwrap().gate_gradient(&batch).unwrap();
        exact &= step.w == dg;
    }
    verdict(
        worst < A9_TOL && exact,
        format!("max |STE loss - compacted loss| = {worst:.2e}; grad(w) == dL/dg bitwise: {exact}"),
    )
}

fn a10_schedule() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, s, ini, end, n) in [
        ("encoder", TemperatureSchedule::encoder_default(), 1000.0, 1e-8, 25_000u64),
        ("encoder-decoder", TemperatureSchedule::seq2seq_default(), 0.1, 1e-8, 15_000u64),
    ] {
        ok &= s.tau_ini == ini && s.tau_end == end && s.n_cooldown == n;
        ok &= s.temperature_at(0) == ini;
        ok &= [n, n + 1, 10 * n].iter().all(|&m| s.temperature_at(m) == end);
        let mid = s.temperature_at(n / 2);
        let oracle = ini * (end / ini).powf((n / 2) as f64 / n as f64);
        let rel = (mid - oracle).abs() / oracle;
        ok &= rel < A10_TOL && (mid - (ini * end).sqrt()).abs() / oracle < A10_TOL;
        parts.push(format!("{name}: tau(N/2) = {mid:.6e}, rel err {rel:.1e}"));
    }
    verdict(ok, parts.join("; "))
}

fn a11_speedup(cfg: &ExperimentConfig) -> Verdict {
    let model = GatedTransformer::build(cfg.model.clone(), &mut seeded(1111)).unwrap();
    let masks = masks_at_fractions(model.head_count(), &[0.0, 0.25, 0.5, 0.75], 11).unwrap();
    let splits = make_splits(cfg, 0).unwrap();
    let batch = splits.test.batch(&(0..cfg.batch_size).collect::<Vec<_>>());
    let rows = bench_speedup(&model, &masks, &batch, &BenchSettings { runs: 100, warmup: 10, repeats: 3 }).unwrap();
    let mut ok = true;
    for w in rows.windows(2) {
        let tolerance = w[0].jitter.max(w[1].jitter);
        ok &= w[1].median_us <= w[0].median_us * (1.0 + tolerance);
    }
    let half = &rows[2];
    ok &= half.speedup_pct > 0.0;
    let trend: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.0}%: {:.0}us (jitter {:.1}%)", r.pruned_pct, r.median_us, 100.0 * r.jitter))
        .collect();
    verdict(ok, format!("{}; speedup at 50% = {:.1}%", trend.join(", "), half.speedup_pct))
}

struct SweepRuns {
    unpruned: Vec<f64>,
    joint12: Vec<CellResult>,
    joint3: Vec<f64>,
    ste3: Vec<f64>,
    michel3: Vec<f64>,
    took: Duration,
}

fn run_sweep(cfg: &ExperimentConfig) -> SweepRuns {
    let start = Instant::now();
    let mut cache = DenseCache::new();
    let mut runs = SweepRuns {
        unpruned: vec![],
        joint12: vec![],
        joint3: vec![],
        ste3: vec![],
        michel3: vec![],
        took: Duration::ZERO,
    };
    for &seed in &cfg.seeds {
        let cell = |m, k, cache: &mut DenseCache| run_cell(cfg, m, k, None, seed, cache).unwrap();
        runs.unpruned.push(cell(Method::Unpruned, None, &mut cache).record.metric_post);
        runs.michel3.push(cell(Method::Michel, Some(3), &mut cache).record.metric_post);
        runs.joint3.push(cell(Method::JointDsp, Some(3), &mut cache).record.metric_post);
        runs.ste3.push(cell(Method::Ste, Some(3), &mut cache).record.metric_post);
        runs.joint12.push(cell(Method::JointDsp, Some(12), &mut cache));
    }
    runs.took = start.elapsed();
    runs
}

fn med(v: &[f64]) -> f64 {
    median(&mut v.to_vec())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn a7_sweep(runs: &SweepRuns) -> Verdict {
    let joint12: Vec<f64> = runs.joint12.iter().map(|r| r.record.metric_post).collect();
    let (u, j12, j3, s3, m3) = (med(&runs.unpruned), med(&joint12), med(&runs.joint3), med(&runs.ste3), med(&runs.michel3));
    let pass = u >= A7_UNPRUNED_MIN && j12 >= u - A7_GAP && j3 >= s3 && j3 > m3 && runs.took <= A7_BUDGET;
    verdict(
        pass,
        format!(
            "median token accuracy: unpruned {u:.3} [{}]; K=12 joint {j12:.3} [{}]; K=3 joint {j3:.3} [{}], STE {s3:.3} [{}], Michel {m3:.3} [{}]; {:.1} min",
            fmt_list(&runs.unpruned),
            fmt_list(&joint12),
            fmt_list(&runs.joint3),
            fmt_list(&runs.ste3),
            fmt_list(&runs.michel3),
            runs.took.as_secs_f64() / 60.0
        ),
    )
}

/// Per seed: the annealed run must hold 100% eventual-keep over the final
/// window and the constant-temperature control must not. Seeds are combined
/// by majority, as the sweep combines them by median.
fn a12_dynamics(cfg: &ExperimentConfig, runs: &SweepRuns) -> Verdict {
    let mut control_cfg = cfg.clone();
    control_cfg.schedule = TemperatureSchedule::constant(cfg.schedule.tau_ini).unwrap();
    let mut good = 0;
    let mut parts = Vec::new();
    for (annealed, &seed) in runs.joint12.iter().zip(&cfg.seeds) {
        let a = track_dynamics(&annealed.outcome.history, &annealed.outcome.mask).unwrap();
        let control = run_cell(&control_cfg, Method::JointDsp, Some(12), None, seed, &mut DenseCache::new()).unwrap();
        let c = track_dynamics(&control.outcome.history, &control.outcome.mask).unwrap();
        let (ha, hc) = (holds_final(&a, A12_WINDOW), holds_final(&c, A12_WINDOW));
        let tail = |r: &[headprune::harness::DynamicsRecord]| {
            let start = r.len() - (r.len() as f64 * A12_WINDOW).round() as usize;
            r[start..].iter().filter(|x| x.eventual_keep_pct == 100.0).count() as f64 / (r.len() - start) as f64
        };
        good += usize::from(ha && !hc);
        parts.push(format!(
            "seed {seed}: annealed holds {ha}, control holds {hc} (100% on {:.0}% of window)",
            100.0 * tail(&c)
        ));
    }
    verdict(2 * good > cfg.seeds.len(), format!("{}; {good}/{} seeds", parts.join("; "), cfg.seeds.len()))
}

fn main() {
    let cfg_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reversal.json");
    let cfg = ExperimentConfig::load(&cfg_path).expect("reference config");
    let mut failed = Vec::new();
    let mut report = |id: &str, v: Verdict| {
        println!("{id} {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(id.to_string());
        }
    };
    report("A1", a1_gate_sum());
    report("A2", a2_hard_limit());
    report("A3", a3_sampling());
    report("A4", a4_relaxation_gradients());
    report("A5", a5_model_gradients());
    report("A6", a6_compaction());
    let runs = run_sweep(&cfg);
    report("A7", a7_sweep(&runs));
    report("A8", a8_hard_concrete());
    report("A9", a9_ste_contract());
    report("A10", a10_schedule());
    report("A11", a11_speedup(&cfg));
    report("A12", a12_dynamics(&cfg, &runs));
    if failed.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
