use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Decoder layer kind: masked self-attention or cumulative average attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LayerKind {
    #[serde(rename = "SELF")]
    SelfAttn,
    Aan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arch {
    Big,
    Deep,
    Aan,
    SelfFirst,
    AanFirst,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::Big, Arch::Deep, Arch::Aan, Arch::SelfFirst, Arch::AanFirst];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Big => "BIG",
            Arch::Deep => "DEEP",
            Arch::Aan => "AAN",
            Arch::SelfFirst => "SELF_FIRST",
            Arch::AanFirst => "AAN_FIRST",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| ModelError::Config(format!("unknown architecture `{s}`")))
    }
}

/// Decoder layer kinds for an architecture. Mixed stacks alternate kinds starting
/// from the named one.
pub fn layer_plan(arch: Arch, dec_layers: usize) -> Vec<LayerKind> {
    let alternate = |first: LayerKind, second: LayerKind| {
        (0..dec_layers).map(|i| if i % 2 == 0 { first } else { second }).collect()
    };
    match arch {
        Arch::Big | Arch::Deep => vec![LayerKind::SelfAttn; dec_layers],
        Arch::Aan => vec![LayerKind::Aan; dec_layers],
        Arch::SelfFirst => alternate(LayerKind::SelfAttn, LayerKind::Aan),
        Arch::AanFirst => alternate(LayerKind::Aan, LayerKind::SelfAttn),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub dec_plan: Vec<LayerKind>,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale configuration: hidden 64, ffn 128, 4 heads.
    pub fn desk(arch: Arch, enc_layers: usize, dec_layers: usize, src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            enc_layers,
            dec_layers,
            hidden: 64,
            ffn: 128,
            heads: 4,
            dec_plan: layer_plan(arch, dec_layers),
            src_vocab,
            tgt_vocab,
            max_len: 128,
        }
    }

    /// Full-scale shapes: hidden 1024, six decoder layers, and the encoder depth and
    /// filter size of the named family (big: 10 layers / 10240, deep: 20 layers / 4096).
    pub fn full_scale(arch: Arch, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (enc_layers, ffn) = match arch {
            Arch::Deep => (20, 4096),
            _ => (10, 10240),
        };
        Self {
            enc_layers,
            dec_layers: 6,
            hidden: 1024,
            ffn,
            heads: 16,
            dec_plan: layer_plan(arch, 6),
            src_vocab,
            tgt_vocab,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dec_plan.len() != self.dec_layers {
            return Err(ModelError::Config(format!(
                "decoder plan has {} entries for {} layers",
                self.dec_plan.len(),
                self.dec_layers
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.src_vocab < 2 || self.tgt_vocab < 2 || self.max_len == 0 {
            return Err(ModelError::Config("vocabularies need at least two entries and max_len > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings. Adam betas are fixed by the recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_tokens: usize,
    pub update_freq: usize,
    pub warmup_steps: usize,
    pub lr_peak: f64,
    pub label_smoothing: f64,
    #[serde(default)]
    pub dropout: f64,
}

impl TrainHyper {
    /// Settings of the full-scale recipe.
    pub fn full_scale() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            batch_tokens: 4096,
            update_freq: 4,
            warmup_steps: 4000,
            lr_peak: 0.0005,
            label_smoothing: 0.1,
            dropout: 0.3,
        }
    }

    /// Same optimizer at toy scale: smaller batches, shorter warmup, higher peak rate.
    pub fn desk() -> Self {
        Self { batch_tokens: 256, update_freq: 1, warmup_steps: 100, lr_peak: 0.003, dropout: 0.1, ..Self::full_scale() }
    }

    /// Inverse square-root schedule with linear warmup; peaks at `lr_peak` when
    /// `step == warmup_steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        if step <= warm {
            self.lr_peak * step / warm
        } else {
            self.lr_peak * (warm / step).sqrt()
        }
    }
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self::desk()
    }
}
