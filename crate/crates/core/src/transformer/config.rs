use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classifier,
    Seq2seq,
}

/// The three attention types of an encoder-decoder model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    EncoderSelf,
    DecoderSelf,
    Cross,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::EncoderSelf => "encoder-self",
            AttentionKind::DecoderSelf => "decoder-self",
            AttentionKind::Cross => "cross",
        }
    }
}

/// Model dimensions. Heads are indexed on one flat axis: encoder
/// self-attention layer by layer, then decoder self-attention, then cross
/// attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: TaskKind,
    /// Encoder layers.
    pub layers: usize,
    /// Decoder layers; must be 0 for classifiers.
    #[serde(default)]
    pub decoder_layers: usize,
    /// Heads per attention sublayer.
    pub heads: usize,
    pub d_model: usize,
    /// Per-head width; `d_model / heads` when absent.
    #[serde(default)]
    pub d_head: Option<usize>,
    /// Feed-forward width; `4 * d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    pub vocab: usize,
    pub max_len: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_classes() -> usize {
    2
}

/// Attention width above which `validate` warns.
const WIDE_ATTENTION_FACTOR: usize = 4;

impl ModelConfig {
    pub fn classifier(layers: usize, heads: usize, d_model: usize, vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            task: TaskKind::Classifier,
            layers,
            decoder_layers: 0,
            heads,
            d_model,
            d_head: None,
            d_ff: None,
            vocab,
            max_len,
            classes: 2,
        }
    }

    pub fn seq2seq(
        encoder_layers: usize,
        decoder_layers: usize,
        heads: usize,
        d_model: usize,
        vocab: usize,
        max_len: usize,
    ) -> Self {
        ModelConfig {
            task: TaskKind::Seq2seq,
            layers: encoder_layers,
            decoder_layers,
            heads,
            d_model,
            d_head: None,
            d_ff: None,
            vocab,
            max_len,
            classes: 2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_head.unwrap_or_else(|| (self.d_model / self.heads.max(1)).max(1))
    }

    pub fn ff_dim(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    /// Attention sublayers in flat-index order.
    pub fn sublayers(&self) -> Vec<(AttentionKind, usize)> {
        let mut out: Vec<_> = (0..self.layers).map(|l| (AttentionKind::EncoderSelf, l)).collect();
        if self.task == TaskKind::Seq2seq {
            out.extend((0..self.decoder_layers).map(|l| (AttentionKind::DecoderSelf, l)));
            out.extend((0..self.decoder_layers).map(|l| (AttentionKind::Cross, l)));
        }
        out
    }

    /// Total head count `H`.
    pub fn total_heads(&self) -> usize {
        self.sublayers().len() * self.heads
    }

    /// Sublayer kind, layer and in-layer position of a flat head index.
    pub fn locate(&self, flat: usize) -> Option<(AttentionKind, usize, usize)> {
        let (kind, layer) = *self.sublayers().get(flat / self.heads.max(1))?;
        Some((kind, layer, flat % self.heads))
    }

    /// Checks the configuration; returns warnings for legal but unusual
    /// settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("classes", self.classes),
            ("d_head", self.head_dim()),
            ("d_ff", self.ff_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        match self.task {
            TaskKind::Classifier if self.decoder_layers != 0 => {
                return Err(Error::Config("classifier models have no decoder layers".into()))
            }
            TaskKind::Seq2seq if self.decoder_layers == 0 => {
                return Err(Error::Config("seq2seq models need decoder layers".into()))
            }
            _ => {}
        }
        let mut warnings = Vec::new();
        if self.head_dim() * self.heads > WIDE_ATTENTION_FACTOR * self.d_model {
            warnings.push(format!(
                "heads x d_head = {} exceeds {}x d_model",
                self.head_dim() * self.heads,
                WIDE_ATTENTION_FACTOR
            ));
        }
        Ok(warnings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_counts() {
        let c = ModelConfig::classifier(2, 4, 32, 10, 16);
        assert_eq!(c.total_heads(), 8);
        assert_eq!(c.head_dim(), 8);
        let s = ModelConfig::seq2seq(2, 2, 4, 64, 10, 16);
        assert_eq!(s.total_heads(), 24);
        assert_eq!(s.locate(0), Some((AttentionKind::EncoderSelf, 0, 0)));
        assert_eq!(s.locate(9), Some((AttentionKind::DecoderSelf, 0, 1)));
        assert_eq!(s.locate(23), Some((AttentionKind::Cross, 1, 3)));
        assert_eq!(s.locate(24), None);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::classifier(2, 4, 32, 10, 16);
        assert!(c.validate().unwrap().is_empty());
        c.d_head = Some(64);
        assert_eq!(c.validate().unwrap().len(), 1);
        c.decoder_layers = 1;
        assert!(c.validate().is_err());
    }
}
