//! Experiment driver: synthetic tasks, training runs, sweeps, benchmarks
//! and reports.

pub mod bench;
pub mod config;
pub mod data;
pub mod eval;
pub mod output;
pub mod run;
pub mod sweep;

pub use bench::{
    bench_speedup, holds_final, masks_at_fractions, oracle_check, report_head_distribution, settled_from, track_dynamics,
    BenchRow, BenchSettings, DynamicsRecord, HeadDistribution, OracleReport,
};
pub use config::{DataConfig, ExperimentConfig, ScoreSplit, Task};
pub use data::{gen_needle_data, gen_reversal_data, Dataset, NeedleData, ReversalData};
pub use eval::{accuracy, evaluate, greedy_decode, mean_loss, token_accuracy};
pub use run::{make_splits, run_cell, CellResult, DenseCache, Splits, SweepRecord};
pub use sweep::{plan, sweep, Cell, SweepSummary};
