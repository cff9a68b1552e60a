use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{DistillError, Result};
use crate::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitLoss {
    Kld,
    Rkld,
    Mse,
    Cosine,
}

impl LogitLoss {
    pub const ALL: [LogitLoss; 4] = [LogitLoss::Kld, LogitLoss::Rkld, LogitLoss::Mse, LogitLoss::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            LogitLoss::Kld => "kld",
            LogitLoss::Rkld => "rkld",
            LogitLoss::Mse => "mse",
            LogitLoss::Cosine => "cosine",
        }
    }
}

impl FromStr for LogitLoss {
    type Err = DistillError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| DistillError::Config(format!("unknown logit loss {s:?}")))
    }
}

/// Hidden states compared by the intermediate loss, all taken after a LayerNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsComponent {
    /// Embedding output, seen through the first block's input norm.
    Emb,
    /// Block output, seen through the next norm.
    O,
    /// MLP input: the block's second norm.
    I,
    /// Query, key and value self-relations.
    Att,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsLossFn {
    #[default]
    Cosine,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// `α = L_logits / L_is`, recomputed every step and not differentiated.
    #[default]
    Dynamic,
    Constant(f64),
}

/// A `teacher:student` layer correspondence, written `"29:13"` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerPair {
    pub teacher: usize,
    pub student: usize,
}

impl fmt::Display for LayerPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.teacher, self.student)
    }
}

impl FromStr for LayerPair {
    type Err = DistillError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || DistillError::Config(format!("layer pair {s:?} is not teacher:student"));
        let (t, st) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self {
            teacher: t.trim().parse().map_err(|_| bad())?,
            student: st.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for LayerPair {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Include the logit term. Off only for the conventional baseline.
    #[serde(default = "yes")]
    pub use_logits: bool,
    pub logit_loss: LogitLoss,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub use_clm: bool,
    #[serde(default)]
    pub is_components: Vec<IsComponent>,
    #[serde(default)]
    pub layer_map: Vec<LayerPair>,
    #[serde(default)]
    pub is_loss_fn: IsLossFn,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
    /// Relation heads for the attention-relation term. Query, key and value
    /// widths of both models must be divisible by it.
    #[serde(default = "one_usize")]
    pub relation_heads: usize,
}

impl Default for DistillConfig {
    /// Logit-only KLD at unit temperature, no top-K, no LM loss.
    fn default() -> Self {
        Self {
            use_logits: true,
            logit_loss: LogitLoss::Kld,
            temperature: 1.0,
            top_k: None,
            use_clm: false,
            is_components: Vec::new(),
            layer_map: Vec::new(),
            is_loss_fn: IsLossFn::Cosine,
            alpha_mode: AlphaMode::Dynamic,
            relation_heads: 1,
        }
    }
}

impl DistillConfig {
    /// Plain next-token training with no teacher terms.
    pub fn conventional() -> Self {
        Self {
            use_logits: false,
            use_clm: true,
            ..Self::default()
        }
    }

    pub fn logit_only(loss: LogitLoss) -> Self {
        Self {
            logit_loss: loss,
            ..Self::default()
        }
    }

    /// Logit-only KLD, plus embedding and block-output terms on the
    /// third-from-last layers when more than a quarter of the depth was removed.
    pub fn recommended(teacher: &ModelConfig, student: &ModelConfig) -> Self {
        let removed = teacher.num_layers.saturating_sub(student.num_layers);
        if removed * 4 <= teacher.num_layers {
            return Self::default();
        }
        Self {
            is_components: vec![IsComponent::Emb, IsComponent::O],
            layer_map: vec![LayerPair {
                teacher: teacher.num_layers.saturating_sub(3),
                student: student.num_layers.saturating_sub(3),
            }],
            ..Self::default()
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.use_logits || !self.is_components.is_empty()
    }

    pub fn validate(&self, teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(DistillError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.use_logits && !self.use_clm && self.is_components.is_empty() {
            return bad("no loss term enabled".into());
        }
        if !self.uses_teacher() {
            return Ok(());
        }
        if teacher.vocab_size != student.vocab_size {
            return bad(format!(
                "vocabularies differ: teacher {}, student {}",
                teacher.vocab_size, student.vocab_size
            ));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > student.vocab_size {
                return bad(format!("top_k {k} outside 1..={}", student.vocab_size));
            }
        }
        if let AlphaMode::Constant(c) = self.alpha_mode {
            if !c.is_finite() || c < 0.0 {
                return bad(format!("constant alpha must be finite and non-negative, got {c}"));
            }
        }
        let needs_map = self.is_components.iter().any(|c| *c != IsComponent::Emb);
        if needs_map && self.layer_map.is_empty() {
            return Err(DistillError::UnmappedComponent);
        }
        for p in &self.layer_map {
            if p.teacher >= teacher.num_layers || p.student >= student.num_layers {
                return bad(format!(
                    "layer pair {p} outside teacher 0..{} / student 0..{}",
                    teacher.num_layers, student.num_layers
                ));
            }
        }
        if self.is_components.contains(&IsComponent::Att) {
            let r = self.relation_heads;
            let widths = [teacher.q_width(), teacher.kv_width(), student.q_width(), student.kv_width()];
            if r == 0 || widths.iter().any(|w| w % r != 0) {
                return bad(format!("relation_heads {r} does not divide query/key/value widths {widths:?}"));
            }
        }
        Ok(())
    }
}
