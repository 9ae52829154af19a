use clap::{Args, Parser, Subcommand};
use headprune::gumbel::{HeadMask, TemperatureSchedule};
use headprune::harness::output::{bench_row, fmt_g6, json_line, write_csv, BENCH_HEADER};
use headprune::harness::{
    bench_speedup, holds_final, masks_at_fractions, oracle_check, report_head_distribution, run_cell, settled_from, sweep,
    track_dynamics, BenchSettings, DenseCache, ExperimentConfig,
};
use headprune::pruners::Method;
use headprune::rng::{stream, Stream};
use headprune::transformer::{Checkpoint, GatedTransformer};
use headprune::{Error, Result};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "headprune", version, about = "Attention-head pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method name, or a comma-separated list for sweeps.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and prune one configuration; one run per K (or lambda).
    Train(Common),
    /// Every method x K x seed cell, appended to sweep.csv.
    Sweep(Common),
    /// Wallclock and size of compacted models at 0/25/50/75% pruning.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Model to time instead of a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Eventual-keep curves of joint DSP with and without annealing.
    Dynamics {
        #[command(flatten)]
        common: Common,
        /// Temperature of the no-annealing control run.
        #[arg(long)]
        control_tau: Option<f64>,
    },
    /// Monte-Carlo subset frequencies against exact probabilities.
    OracleCheck {
        /// Head importances; `1,2,...,h` when absent.
        #[arg(long, value_delimiter = ',')]
        importance: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        h: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Kept heads per layer and attention type.
    Report {
        /// Checkpoint holding config and mask.
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mask bit string, e.g. 1100...
        #[arg(long)]
        mask: Option<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    if let [m] = common.method.as_slice() {
        cfg.pruner = Method::parse(m)?;
    }
    if !common.k.is_empty() {
        cfg.k = common.k.clone();
    }
    if !common.lambda.is_empty() {
        cfg.lambda = common.lambda.clone();
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn methods(common: &Common, cfg: &ExperimentConfig) -> Result<Vec<Method>> {
    if common.method.is_empty() {
        Ok(vec![cfg.pruner])
    } else {
        common.method.iter().map(|m| Method::parse(m)).collect()
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let dir = out_dir(&cfg)?;
    let targets: Vec<(Option<usize>, Option<f64>)> = match cfg.pruner {
        Method::Unpruned => vec![(None, None)],
        Method::Voita if cfg.k.is_empty() => cfg.lambda.iter().map(|&l| (None, Some(l))).collect(),
        Method::Voita => cfg.k.iter().map(|&k| (Some(k), cfg.lambda.first().copied())).collect(),
        _ => cfg.k.iter().map(|&k| (Some(k), None)).collect(),
    };
    let mut cache = DenseCache::new();
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        for &(k, lambda) in &targets {
            let res = run_cell(&cfg, cfg.pruner, k, lambda, seed, &mut cache)?;
            for (e, l) in res.epoch_losses.iter().enumerate() {
                println!("seed {seed} epoch {} loss {}", e + 1, fmt_g6(*l));
            }
            let r = &res.record;
            let raw = res.outcome.raw_kept.map(|c| format!(" raw_kept {c}")).unwrap_or_default();
            println!(
                "{} seed {seed} K {}{raw} metric_pre {} metric_post {} params {} mask {}",
                r.method,
                r.k,
                fmt_g6(r.metric_pre),
                fmt_g6(r.metric_post),
                r.params,
                r.mask
            );
            lines.push(json_line(&res.outcome)?);
            let tag = match (k, lambda) {
                (Some(k), _) => format!("k{k}"),
                (None, Some(l)) => format!("lambda{}", fmt_g6(l)),
                _ => "full".into(),
            };
            let ckpt = Checkpoint::new(res.model, HeadMask::all(res.record.k))?;
            ckpt.save(&dir.join(format!("{}-{tag}-seed{seed}.json", r.method)))?;
        }
    }
    write_lines(&dir.join("outcomes.jsonl"), &lines)
}

fn run_sweep(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let dir = out_dir(&cfg)?;
    let summary = sweep(&cfg, &methods(common, &cfg)?, &dir)?;
    println!(
        "{} cells run, {} already present, {} failed; results in {}",
        summary.records.len(),
        summary.skipped,
        summary.failed.len(),
        dir.join("sweep.csv").display()
    );
    for (cell, err) in &summary.failed {
        eprintln!("failed: {} K {:?} seed {}: {err}", cell.method, cell.k, cell.seed);
    }
    Ok(())
}

fn bench(common: &Common, checkpoint: Option<&Path>, runs: usize, repeats: usize) -> Result<()> {
    let cfg = load(common)?;
    let dir = out_dir(&cfg)?;
    let seed = cfg.seeds[0];
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.model,
        None => GatedTransformer::build(cfg.model.clone(), &mut stream(seed, Stream::Init))?,
    };
    let masks = masks_at_fractions(model.head_count(), &[0.0, 0.25, 0.5, 0.75], seed)?;
    let splits = headprune::harness::make_splits(&cfg, seed)?;
    let idx: Vec<usize> = (0..cfg.batch_size.min(splits.test.len())).collect();
    let batch = splits.test.batch(&idx);
    let rows = bench_speedup(&model, &masks, &batch, &BenchSettings { runs, warmup: 10, repeats })?;
    let lines: Vec<String> = rows.iter().map(bench_row).collect();
    println!("{BENCH_HEADER}");
    for l in &lines {
        println!("{l}");
    }
    write_csv(&dir.join("bench.csv"), BENCH_HEADER, &lines)
}

fn dynamics(common: &Common, control_tau: Option<f64>) -> Result<()> {
    let mut cfg = load(common)?;
    let dir = out_dir(&cfg)?;
    let k = *cfg.k.first().ok_or_else(|| Error::Config("dynamics needs a K".into()))?;
    let seed = cfg.seeds[0];
    let annealed = cfg.schedule;
    let mut lines = Vec::new();
    for (label, schedule) in [
        ("annealed", annealed),
        ("constant", TemperatureSchedule::constant(control_tau.unwrap_or(annealed.tau_ini))?),
    ] {
        cfg.schedule = schedule;
        let res = run_cell(&cfg, Method::JointDsp, Some(k), None, seed, &mut DenseCache::new())?;
        let records = track_dynamics(&res.outcome.history, &res.outcome.mask)?;
        let settled = settled_from(&records);
        println!(
            "{label}: final metric {} settled from step {} of {}, holds final 20%: {}",
            fmt_g6(res.record.metric_post),
            settled.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            records.len(),
            if holds_final(&records, 0.2) { "yes" } else { "no" }
        );
        for r in &records {
            #[derive(serde::Serialize)]
            struct Line<'a> {
                run: &'a str,
                #[serde(flatten)]
                record: &'a headprune::harness::DynamicsRecord,
            }
            lines.push(json_line(&Line { run: label, record: r })?);
        }
    }
    write_lines(&dir.join("dynamics.jsonl"), &lines)
}

fn report(checkpoint: Option<&Path>, config: Option<&Path>, mask: Option<&str>) -> Result<()> {
    let (model_cfg, mask) = match (checkpoint, config) {
        (Some(p), _) => {
            let c = Checkpoint::load(p)?;
            let present = match mask {
                Some(bits) => HeadMask::from_bit_string(bits)?,
                None => c.mask.clone(),
            };
            if present.len() != c.model.head_count() {
                return Err(Error::Contract("mask length differs from the checkpoint's heads".into()));
            }
            // Lift the mask over present heads back to original head indices.
            let mut bits = c.model.kept_origins();
            let mut next = present.bits().iter();
            for b in bits.iter_mut().filter(|b| **b) {
                *b = *next.next().unwrap_or(&false);
            }
            (c.model.config().clone(), HeadMask::new(bits))
        }
        (None, Some(p)) => {
            let cfg = ExperimentConfig::load(p)?;
            let m = match mask {
                Some(bits) => HeadMask::from_bit_string(bits)?,
                None => HeadMask::all(cfg.head_count()),
            };
            (cfg.model, m)
        }
        (None, None) => return Err(Error::Config("report needs --checkpoint or --config".into())),
    };
    let dist = report_head_distribution(&mask, &model_cfg)?;
    println!("type,layer,kept,total");
    for (kind, layer, kept, total) in &dist.layers {
        println!("{},{layer},{kept},{total}", kind.label());
    }
    for (kind, kept, total) in &dist.by_kind {
        println!("{},all,{kept},{total}", kind.label());
    }
    println!("total,all,{},{}", dist.kept(), mask.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => train(&c),
        Command::Sweep(c) => run_sweep(&c),
        Command::Bench { common, checkpoint, runs, repeats } => bench(&common, checkpoint.as_deref(), runs, repeats),
        Command::Dynamics { common, control_tau } => dynamics(&common, control_tau),
        Command::OracleCheck { importance, h, k, samples, seed } => {
            let importance = if importance.is_empty() { (1..=h).map(|i| i as f64).collect() } else { importance };
            let rep = oracle_check(&importance, k, samples, seed)?;
            println!("subset,empirical,exact");
            for (bits, emp, exact) in &rep.subsets {
                println!("{bits},{},{}", fmt_g6(*emp), fmt_g6(*exact));
            }
            println!("tv_distance,{}", fmt_g6(rep.tv_distance));
            Ok(())
        }
        Command::Report { checkpoint, config, mask } => report(checkpoint.as_deref(), config.as_deref(), mask.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
