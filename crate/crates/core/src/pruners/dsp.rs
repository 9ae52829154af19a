//! Differentiable subset pruning and its straight-through baseline.

use super::common::{check_loss, nonempty, sgd_update, sgd_vector, Method, PruningOutcome, StepRecord, TrainSettings};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gumbel::{hard_top_k, sample_gumbel, soft_top_k_node, GumbelNoise, HeadMask, TemperatureSchedule};
use crate::transformer::{Batch, GatedTransformer, Gates};
use rand::Rng;

/// Loss and gradients from one relaxed or straight-through step.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub loss: f64,
    pub tau: Option<f64>,
    /// Gate values used in the forward pass.
    pub gates: Vec<f64>,
    pub saturated: bool,
    /// Per-parameter gradients; `None` when parameters were frozen.
    pub theta: Option<Vec<Option<Vec<f64>>>>,
    pub w: Vec<f64>,
}

fn check_w(model: &GatedTransformer, w: &[f64], k: usize) -> Result<()> {
    let h = model.head_count();
    if w.len() != h {
        return Err(Error::Contract(format!("{} importance weights for {h} heads", w.len())));
    }
    if k < 1 || k > h {
        return Err(Error::Domain(format!("K = {k} outside [1, {h}]")));
    }
    Ok(())
}

/// Joint step with explicit noise: gates are `soft_top_k(w + noise, K, tau(n))`.
pub fn joint_dsp_step_with_noise(
    model: &GatedTransformer,
    w: &[f64],
    n: u64,
    k: usize,
    schedule: &TemperatureSchedule,
    batch: &Batch,
    noise: &GumbelNoise,
    train_theta: bool,
) -> Result<StepGrads> {
    check_w(model, w, k)?;
    let tau = schedule.temperature_at(n);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, train_theta)?;
    let wid = tape.param(Tensor::vector(w.to_vec())?)?;
    let nid = tape.constant(Tensor::vector(noise.values().to_vec())?)?;
    let r = tape.add(wid, nid)?;
    let soft = soft_top_k_node(&mut tape, r, k, tau)?;
    let loss = model.loss(&mut tape, &p, Gates::Node(soft.gates), batch)?;
    tape.backward(loss)?;
    Ok(StepGrads {
        loss: tape.value(loss).item(),
        tau: Some(tau),
        gates: tape.data(soft.gates).to_vec(),
        saturated: soft.saturated,
        theta: train_theta.then(|| p.ids.iter().map(|&id| tape.grad(id).map(<[f64]>::to_vec)).collect()),
        w: tape.grad(wid).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.len()]),
    })
}

/// Joint step with fresh Gumbel noise drawn from `rng`.
pub fn joint_dsp_step<R: Rng + ?Sized>(
    model: &GatedTransformer,
    w: &[f64],
    n: u64,
    k: usize,
    schedule: &TemperatureSchedule,
    batch: &Batch,
    rng: &mut R,
) -> Result<StepGrads> {
    let noise = sample_gumbel(w.len(), rng)?;
    joint_dsp_step_with_noise(model, w, n, k, schedule, batch, &noise, true)
}

/// Straight-through step with explicit noise. The forward pass uses the
/// binary mask `hard_top_k(w + noise, K)`; its gradient is passed to `w`
/// unchanged.
pub fn ste_step_with_noise(
    model: &GatedTransformer,
    w: &[f64],
    k: usize,
    batch: &Batch,
    noise: &GumbelNoise,
    train_theta: bool,
) -> Result<StepGrads> {
    check_w(model, w, k)?;
    let r: Vec<f64> = w.iter().zip(noise.values()).map(|(a, b)| a + b).collect();
    let mask = hard_top_k(&r, k)?;
    let gates = mask.as_gates();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, train_theta)?;
    let g = tape.param(Tensor::vector(gates.clone())?)?;
    let loss = model.loss(&mut tape, &p, Gates::Node(g), batch)?;
    tape.backward(loss)?;
    Ok(StepGrads {
        loss: tape.value(loss).item(),
        tau: None,
        gates,
        saturated: false,
        theta: train_theta.then(|| p.ids.iter().map(|&id| tape.grad(id).map(<[f64]>::to_vec)).collect()),
        w: tape.grad(g).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.len()]),
    })
}

pub fn ste_step<R: Rng + ?Sized>(
    model: &GatedTransformer,
    w: &[f64],
    k: usize,
    batch: &Batch,
    rng: &mut R,
) -> Result<StepGrads> {
    let noise = sample_gumbel(w.len(), rng)?;
    ste_step_with_noise(model, w, k, batch, &noise, true)
}

/// Noise-free top-K of `w`.
pub fn deterministic_mask(w: &[f64], k: usize) -> Result<HeadMask> {
    hard_top_k(w, k)
}

/// `w` is the updated weight vector, `before` the one the step used.
fn record(step: u64, g: &StepGrads, before: &[f64], noise: &GumbelNoise, w: &[f64], k: usize) -> Result<StepRecord> {
    let r: Vec<f64> = before.iter().zip(noise.values()).map(|(a, b)| a + b).collect();
    Ok(StepRecord {
        step,
        tau: g.tau,
        loss: g.loss,
        top_k: Some(deterministic_mask(w, k)?.to_bit_string()),
        selected: Some(hard_top_k(&r, k)?.to_bit_string()),
        max_gate: g.gates.iter().cloned().reduce(f64::max),
    })
}

/// Which relaxation a joint run uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointKind {
    Dsp(TemperatureSchedule),
    Ste,
}

/// Trains model parameters and importance logits together. `w` is updated
/// in place; the history records the heads each step selected and the
/// noise-free top-K of `w` after its update.
pub fn train_joint<R: Rng + ?Sized>(
    model: &mut GatedTransformer,
    w: &mut [f64],
    k: usize,
    kind: JointKind,
    data: &[Batch],
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    nonempty(data)?;
    check_w(model, w, k)?;
    let mut history = Vec::with_capacity(settings.steps as usize);
    for n in 0..settings.steps {
        let batch = &data[n as usize % data.len()];
        let noise = sample_gumbel(w.len(), rng)?;
        let g = match kind {
            JointKind::Dsp(schedule) => joint_dsp_step_with_noise(model, w, n, k, &schedule, batch, &noise, true)?,
            JointKind::Ste => ste_step_with_noise(model, w, k, batch, &noise, true)?,
        };
        check_loss(g.loss, n)?;
        if let Some(theta) = &g.theta {
            sgd_update(model, theta, settings.lr_theta, settings.clip_norm);
        }
        let before = w.to_vec();
        sgd_vector(w, &g.w, settings.lr_w);
        history.push(record(n, &g, &before, &noise, w, k)?);
    }
    Ok(history)
}

/// Pipelined DSP: model parameters stay frozen while `w` (starting at zero)
/// learns for `steps` steps with the annealing compressed so that cooldown
/// ends at 80% of the budget. The mask is the noise-free top-K of `w`.
pub fn pipelined_dsp<R: Rng + ?Sized>(
    model: &GatedTransformer,
    data: &[Batch],
    k: usize,
    schedule: &TemperatureSchedule,
    lr_w: f64,
    steps: u64,
    rng: &mut R,
) -> Result<PruningOutcome> {
    nonempty(data)?;
    let h = model.head_count();
    let mut w = vec![0.0; h];
    check_w(model, &w, k)?;
    let schedule = schedule.with_cooldown(cooldown_for(steps));
    let mut history = Vec::with_capacity(steps as usize);
    for n in 0..steps {
        let batch = &data[n as usize % data.len()];
        let noise = sample_gumbel(h, rng)?;
        let g = joint_dsp_step_with_noise(model, &w, n, k, &schedule, batch, &noise, false)?;
        check_loss(g.loss, n)?;
        let before = w.clone();
        sgd_vector(&mut w, &g.w, lr_w);
        history.push(record(n, &g, &before, &noise, &w, k)?);
    }
    Ok(PruningOutcome {
        method: Method::PipelinedDsp,
        k,
        mask: deterministic_mask(&w, k)?,
        history,
        metric_pre: None,
        metric_post: None,
        scores: w,
        raw_kept: None,
    })
}

/// Cooldown length for a one-epoch importance pass: 80% of its steps.
pub fn cooldown_for(steps: u64) -> u64 {
    ((steps * 4) / 5).max(1)
}
