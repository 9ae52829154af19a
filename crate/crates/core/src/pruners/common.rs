use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gumbel::HeadMask;
use crate::transformer::{Batch, GatedTransformer, Gates};
use serde::{Deserialize, Serialize};

/// The pruning strategies, plus the unpruned reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Unpruned,
    Michel,
    PipelinedDsp,
    Voita,
    Ste,
    JointDsp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Unpruned,
        Method::Michel,
        Method::PipelinedDsp,
        Method::Voita,
        Method::Ste,
        Method::JointDsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unpruned => "unpruned",
            Method::Michel => "michel",
            Method::PipelinedDsp => "pipelined-dsp",
            Method::Voita => "voita",
            Method::Ste => "ste",
            Method::JointDsp => "joint-dsp",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    /// Whether the model is trained first and pruned afterwards.
    pub fn is_pipelined(self) -> bool {
        matches!(self, Method::Michel | Method::PipelinedDsp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where a score vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    LearnedWeights,
    GradientProxy,
    GateProbability,
}

/// Nonnegative per-head importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub source: ScoreSource,
}

impl ImportanceScores {
    pub fn new(scores: Vec<f64>, source: ScoreSource) -> Result<Self> {
        if scores.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::Domain("importance scores must be finite and nonnegative".into()));
        }
        Ok(ImportanceScores { scores, source })
    }

    /// `exp(w)` for learned log-importances.
    pub fn from_log_weights(w: &[f64]) -> Result<Self> {
        ImportanceScores::new(w.iter().map(|v| v.exp()).collect(), ScoreSource::LearnedWeights)
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tau: Option<f64>,
    pub loss: f64,
    /// Noise-free top-K of the pruning scores after this step's update.
    pub top_k: Option<String>,
    /// Heads the step actually selected: top-K of the perturbed logits.
    #[serde(default)]
    pub selected: Option<String>,
    /// Largest relaxed gate value seen at this step.
    pub max_gate: Option<f64>,
}

/// Final mask and history of a pruning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningOutcome {
    pub method: Method,
    pub k: usize,
    pub mask: HeadMask,
    pub history: Vec<StepRecord>,
    pub metric_pre: Option<f64>,
    pub metric_post: Option<f64>,
    /// Learned or estimated scores the mask was read from.
    pub scores: Vec<f64>,
    /// Kept-head count before any size adjustment (Hard Concrete gates).
    pub raw_kept: Option<usize>,
}

/// Learning rates and step budget for gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr_theta: f64,
    pub lr_w: f64,
    pub steps: u64,
    /// Global gradient-norm clip for model parameters.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_theta >= 0.0) || !(self.lr_w >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Plain gradient step on every model parameter.
pub fn sgd_update(model: &mut GatedTransformer, grads: &[Option<Vec<f64>>], lr: f64, clip_norm: Option<f64>) {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (p, g) in model.params_mut().iter_mut().zip(grads) {
        if let Some(g) = g {
            for (v, d) in p.data_mut().iter_mut().zip(g) {
                *v -= lr * scale * d;
            }
        }
    }
}

pub fn sgd_vector(w: &mut [f64], grad: &[f64], lr: f64) {
    for (v, g) in w.iter_mut().zip(grad) {
        *v -= lr * g;
    }
}

pub(crate) fn check_loss(loss: f64, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss became {loss} at step {step}")))
    }
}

pub(crate) fn nonempty(data: &[Batch]) -> Result<()> {
    if data.is_empty() {
        Err(Error::Domain("no training batches".into()))
    } else {
        Ok(())
    }
}

/// One plain training step with fixed gates; returns the loss.
pub fn fixed_gate_step(
    model: &mut GatedTransformer,
    gates: Option<&[f64]>,
    batch: &Batch,
    settings: &TrainSettings,
) -> Result<f64> {
    let mut tape = crate::autodiff::Tape::new();
    let p = model.bind(&mut tape, true)?;
    let g = match gates {
        Some(values) => Gates::Node(tape.constant(Tensor::new(&[values.len()], values.to_vec())?)?),
        None => Gates::Ones,
    };
    let loss = model.loss(&mut tape, &p, g, batch)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = p.ids.iter().map(|&id| tape.grad(id).map(<[f64]>::to_vec)).collect();
    let value = tape.value(loss).item();
    sgd_update(model, &grads, settings.lr_theta, settings.clip_norm);
    Ok(value)
}

/// Trains all parameters with all gates open (or fixed to `mask`).
pub fn train_fixed(
    model: &mut GatedTransformer,
    mask: Option<&HeadMask>,
    data: &[Batch],
    settings: &TrainSettings,
) -> Result<Vec<StepRecord>> {
    nonempty(data)?;
    let gates = mask.map(HeadMask::as_gates);
    let mut history = Vec::with_capacity(settings.steps as usize);
    for step in 0..settings.steps {
        let batch = &data[step as usize % data.len()];
        let loss = fixed_gate_step(model, gates.as_deref(), batch, settings)?;
        check_loss(loss, step)?;
        history.push(StepRecord { step, tau: None, loss, top_k: None, selected: None, max_gate: None });
    }
    Ok(history)
}
