use crate::error::{Error, Result};
use crate::gumbel::TemperatureSchedule;
use crate::pruners::{HardConcrete, Method};
use crate::transformer::{ModelConfig, TaskKind};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NeedleClassification,
    SequenceReversal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    /// Size of the held-out and test splits each.
    pub eval_size: usize,
    /// Task tokens, excluding the decoder start token.
    pub vocab: usize,
    pub length: usize,
}

/// Which split the gradient-proxy scores are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSplit {
    #[default]
    HeldOut,
    Train,
}

/// Cooldown steps of the reference configs, a bit under half their budget.
pub const DESK_COOLDOWN: u64 = 300;

/// A complete training and pruning run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pruner: Method,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub lambda: Vec<f64>,
    pub schedule: TemperatureSchedule,
    pub lr_theta: f64,
    pub lr_w: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed-mask training steps after the mask is chosen.
    #[serde(default)]
    pub finetune_steps: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Heads removed between Michel score recomputations; 10% of H if absent.
    #[serde(default)]
    pub michel_block: Option<usize>,
    #[serde(default)]
    pub michel_split: ScoreSplit,
    #[serde(default)]
    pub hard_concrete: HardConcrete,
    /// Initial Hard Concrete location for every gate.
    #[serde(default)]
    pub phi_init: f64,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn head_count(&self) -> usize {
        self.model.total_heads()
    }

    /// Embedding rows the model needs for this task's tokens.
    pub fn required_vocab(&self) -> usize {
        match self.task {
            Task::NeedleClassification => self.data.vocab,
            Task::SequenceReversal => self.data.vocab + 1,
        }
    }

    /// Checks cross-field consistency; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.model.validate()?;
        let want = match self.task {
            Task::NeedleClassification => TaskKind::Classifier,
            Task::SequenceReversal => TaskKind::Seq2seq,
        };
        if self.model.task != want {
            return Err(Error::Config(format!("task {:?} needs a {:?} model", self.task, want)));
        }
        if self.model.vocab != self.required_vocab() {
            return Err(Error::Config(format!(
                "model vocab {} but the task needs {}",
                self.model.vocab,
                self.required_vocab()
            )));
        }
        if self.model.max_len < self.data.length {
            return Err(Error::Config("model max_len shorter than the sequences".into()));
        }
        if self.data.vocab < 4 || self.data.length < 4 {
            return Err(Error::Config("data vocab and length must be at least 4".into()));
        }
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return Err(Error::Config("train and eval splits must be nonempty".into()));
        }
        let h = self.head_count();
        if let Some(&k) = self.k.iter().find(|&&k| k < 1 || k > h) {
            return Err(Error::Config(format!("K = {k} outside [1, {h}]")));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambda values must be finite and nonnegative".into()));
        }
        if self.pruner == Method::Voita && self.lambda.is_empty() {
            return Err(Error::Config("voita needs at least one lambda".into()));
        }
        if !matches!(self.pruner, Method::Unpruned | Method::Voita) && self.k.is_empty() {
            return Err(Error::Config(format!("{} needs at least one K", self.pruner)));
        }
        self.schedule.validate()?;
        self.hard_concrete.validate()?;
        if !(self.lr_theta >= 0.0) || !(self.lr_w >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.batch_size > self.data.train_size {
            return Err(Error::Config("batch_size exceeds train_size".into()));
        }
        if matches!(self.michel_block, Some(0)) {
            return Err(Error::Config("michel_block must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(warnings)
    }

    /// Reference encoder-decoder reversal setup with 24 heads. The
    /// temperature endpoints are the encoder-decoder ones; cooldown is
    /// shortened to fit 640 training steps.
    pub fn reversal_reference() -> Self {
        let data = DataConfig { train_size: 1024, eval_size: 128, vocab: 8, length: 6 };
        let model = ModelConfig::seq2seq(2, 2, 4, 64, data.vocab + 1, data.length);
        ExperimentConfig {
            task: Task::SequenceReversal,
            model,
            data,
            pruner: Method::JointDsp,
            k: vec![3, 12, 24],
            lambda: vec![],
            schedule: TemperatureSchedule { n_cooldown: DESK_COOLDOWN, ..TemperatureSchedule::seq2seq_default() },
            lr_theta: 0.1,
            lr_w: 0.2,
            epochs: 10,
            batch_size: 16,
            finetune_steps: 0,
            clip_norm: Some(1.0),
            michel_block: None,
            michel_split: ScoreSplit::HeldOut,
            hard_concrete: HardConcrete::default(),
            phi_init: 0.0,
            seeds: vec![0, 1, 2],
            out_dir: "runs/reversal".into(),
        }
    }

    /// Reference needle classifier with 8 heads.
    pub fn needle_reference() -> Self {
        let data = DataConfig { train_size: 1024, eval_size: 256, vocab: 8, length: 12 };
        let model = ModelConfig::classifier(2, 4, 32, data.vocab, data.length);
        ExperimentConfig {
            task: Task::NeedleClassification,
            model,
            data,
            pruner: Method::JointDsp,
            k: vec![2, 4, 8],
            lambda: vec![],
            schedule: TemperatureSchedule { n_cooldown: DESK_COOLDOWN, ..TemperatureSchedule::encoder_default() },
            lr_theta: 0.1,
            lr_w: 0.5,
            epochs: 10,
            batch_size: 16,
            finetune_steps: 0,
            clip_norm: Some(1.0),
            michel_block: None,
            michel_split: ScoreSplit::HeldOut,
            hard_concrete: HardConcrete::default(),
            phi_init: 0.0,
            seeds: vec![0],
            out_dir: "runs/needle".into(),
        }
    }
}
