//! Differentiable subset pruning of Transformer attention heads.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: a small tape-based reverse-mode engine over `f64` tensors.
//! * [`gumbel`]: Gumbel noise, hard and soft top-K, the subset-probability
//!   oracle and the temperature schedule.
//! * [`transformer`]: toy encoder and encoder-decoder models with one gate per
//!   attention head, plus physical head removal.
//! * [`pruners`]: joint and pipelined subset pruning, straight-through,
//!   gradient-importance greedy pruning and Hard Concrete L0 gates.
//! * [`harness`]: synthetic tasks, training loops, sweeps, benchmarks and
//!   reports behind the `headprune` CLI.

pub mod autodiff;
pub mod error;
pub mod gumbel;
pub mod harness;
pub mod pruners;
pub mod rng;
pub mod transformer;

pub use error::{Error, Result};
