//! Hard Concrete gates with an expected-L0 penalty.

use super::common::{check_loss, nonempty, sgd_update, sgd_vector, StepRecord, TrainSettings};
use crate::autodiff::{sigmoid, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gumbel::HeadMask;
use crate::transformer::{Batch, GatedTransformer, Gates};
use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Stretch interval `(gamma, zeta)` and temperature `beta` of a Hard
/// Concrete gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl HardConcrete {
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let hc = HardConcrete { beta, gamma, zeta };
        hc.validate()?;
        Ok(hc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.gamma < 0.0) || !(self.zeta > 1.0) {
            return Err(Error::Domain(format!(
                "Hard Concrete needs beta > 0 and gamma < 0 < 1 < zeta, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Shift such that `P(g != 0) = sigmoid(phi - shift)`.
    fn shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Closed-form probability that the gate is nonzero.
    pub fn prob_nonzero(&self, phi: f64) -> f64 {
        sigmoid(phi - self.shift())
    }

    /// Gate for a given uniform draw `u` in (0, 1).
    pub fn gate_from_uniform(&self, phi: f64, u: f64) -> f64 {
        let s = sigmoid(((u.ln() - (1.0 - u).ln()) + phi) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// Deterministic gate used once training is over.
    pub fn expected_gate(&self, phi: f64) -> f64 {
        self.stretched_mean(phi).clamp(0.0, 1.0)
    }

    /// Unclamped `sigmoid(phi) (zeta - gamma) + gamma`; keeps ranking
    /// information where the clamped gate saturates.
    pub fn stretched_mean(&self, phi: f64) -> f64 {
        sigmoid(phi) * (self.zeta - self.gamma) + self.gamma
    }
}

/// One sampled Hard Concrete gate.
pub fn hard_concrete_gate<R: Rng + ?Sized>(phi: f64, hc: &HardConcrete, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    hc.gate_from_uniform(phi, u)
}

/// `H` sampled gates recorded on the tape, differentiable in `phi` where
/// unclamped.
pub fn hard_concrete_node(tape: &mut Tape, phi: NodeId, hc: &HardConcrete, uniforms: &[f64]) -> Result<NodeId> {
    let logit_u: Vec<f64> = uniforms.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect();
    let lu = tape.constant(Tensor::vector(logit_u)?)?;
    let a = tape.add(phi, lu)?;
    let a = tape.scale(a, 1.0 / hc.beta)?;
    let s = tape.sigmoid(a)?;
    let s = tape.scale(s, hc.zeta - hc.gamma)?;
    let s = tape.add_scalar(s, hc.gamma)?;
    tape.clamp(s, 0.0, 1.0)
}

/// Expected number of open gates `sum_h (1 - P(g_h = 0))` on the tape.
pub fn expected_l0_node(tape: &mut Tape, phi: NodeId, hc: &HardConcrete) -> Result<NodeId> {
    let shifted = tape.add_scalar(phi, -hc.shift())?;
    let p = tape.sigmoid(shifted)?;
    tape.sum(p)
}

/// `L + lambda * sum_h (1 - P(g_h = 0 | phi_h))`.
pub fn voita_objective(task_loss: f64, phi: &[f64], lambda: f64, hc: &HardConcrete) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let l0: f64 = phi.iter().map(|&p| hc.prob_nonzero(p)).sum();
    Ok(task_loss + lambda * l0)
}

/// Heads whose deterministic gate is nonzero.
pub fn hard_concrete_mask(phi: &[f64], hc: &HardConcrete) -> HeadMask {
    HeadMask::new(phi.iter().map(|&p| hc.expected_gate(p) > 0.0).collect())
}

/// Trains model parameters and gate locations `phi` (updated in place) on
/// the penalized objective. `beta` stays fixed throughout.
pub fn train_voita<R: Rng + ?Sized>(
    model: &mut GatedTransformer,
    phi: &mut [f64],
    lambda: f64,
    hc: &HardConcrete,
    data: &[Batch],
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<Vec<StepRecord>> {
    nonempty(data)?;
    hc.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    let h = model.head_count();
    if phi.len() != h {
        return Err(Error::Contract(format!("{} gate locations for {h} heads", phi.len())));
    }
    let mut history = Vec::with_capacity(settings.steps as usize);
    for n in 0..settings.steps {
        let batch = &data[n as usize % data.len()];
        let uniforms: Vec<f64> = (0..h).map(|_| rng.sample(Open01)).collect();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true)?;
        let pid = tape.param(Tensor::vector(phi.to_vec())?)?;
        let gates = hard_concrete_node(&mut tape, pid, hc, &uniforms)?;
        let task = model.loss(&mut tape, &p, Gates::Node(gates), batch)?;
        let l0 = expected_l0_node(&mut tape, pid, hc)?;
        let penalty = tape.scale(l0, lambda)?;
        let total = tape.add(task, penalty)?;
        tape.backward(total)?;
        let loss = tape.value(task).item();
        check_loss(loss, n)?;
        let theta: Vec<Option<Vec<f64>>> = p.ids.iter().map(|&id| tape.grad(id).map(<[f64]>::to_vec)).collect();
        let gphi = tape.grad(pid).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; h]);
        let max_gate = tape.data(gates).iter().cloned().reduce(f64::max);
        let open = HeadMask::new(tape.data(gates).iter().map(|&g| g > 0.0).collect());
        sgd_update(model, &theta, settings.lr_theta, settings.clip_norm);
        sgd_vector(phi, &gphi, settings.lr_w);
        history.push(StepRecord {
            step: n,
            tau: None,
            loss,
            top_k: Some(hard_concrete_mask(phi, hc).to_bit_string()),
            selected: Some(open.to_bit_string()),
            max_gate,
        });
    }
    Ok(history)
}
