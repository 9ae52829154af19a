//! Head pruning strategies: learned subset selection (pipelined and joint),
//! its straight-through variant, gradient-proxy greedy pruning and Hard
//! Concrete gates with an L0 penalty.

mod common;
mod dsp;
mod finalize;
mod michel;
mod voita;

pub use common::{
    fixed_gate_step, sgd_update, sgd_vector, train_fixed, ImportanceScores, Method, PruningOutcome, ScoreSource,
    StepRecord, TrainSettings,
};
pub use dsp::{
    cooldown_for, deterministic_mask, joint_dsp_step, joint_dsp_step_with_noise, pipelined_dsp, ste_step,
    ste_step_with_noise, train_joint, JointKind, StepGrads,
};
pub use finalize::{adjust_mask_to_k, finalize_and_finetune, finetune_mask};
pub use michel::{default_block, greedy_pipeline_prune, michel_importance, michel_prune};
pub use voita::{
    expected_l0_node, hard_concrete_gate, hard_concrete_mask, hard_concrete_node, train_voita, voita_objective,
    HardConcrete,
};
