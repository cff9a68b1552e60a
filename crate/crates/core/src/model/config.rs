use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters of a decoder-only transformer.
///
/// `d_head` is independent of `d_model`: the attention inner width is
/// `num_heads · d_head`, so pruning heads or embedding channels never changes
/// the per-head width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_query_groups: usize,
    pub d_head: usize,
    pub d_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

/// Exact parameter counts. LayerNorm parameters are non-embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub non_embedding: u64,
}

impl ModelConfig {
    /// The 4-layer, 64-wide configuration used throughout the tests and demos.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            num_heads: 8,
            num_query_groups: 2,
            d_head: 8,
            d_hidden: 256,
            vocab_size: 256,
            max_seq_len: 128,
            tie_embeddings: false,
        }
    }

    /// 32 layers, 6144 wide, 48 heads in 8 groups, 24576 MLP, 256k vocabulary.
    pub fn reference_15b() -> Self {
        Self::reference(32, 6144, 48, 24576)
    }

    /// 32 layers, 4096 wide, 48 heads in 8 groups, 16384 MLP.
    pub fn reference_8b() -> Self {
        Self::reference(32, 4096, 48, 16384)
    }

    /// 32 layers, 3072 wide, 24 heads in 8 groups, 9216 MLP.
    pub fn reference_4b() -> Self {
        Self::reference(32, 3072, 24, 9216)
    }

    fn reference(num_layers: usize, d_model: usize, num_heads: usize, d_hidden: usize) -> Self {
        Self {
            num_layers,
            d_model,
            num_heads,
            num_query_groups: 8,
            d_head: 128,
            d_hidden,
            vocab_size: 256_000,
            max_seq_len: 4096,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let extents = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_query_groups", self.num_query_groups),
            ("d_head", self.d_head),
            ("d_hidden", self.d_hidden),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.num_heads % self.num_query_groups != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads {} not divisible by num_query_groups {}",
                self.num_heads, self.num_query_groups
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_head {} must be even for rotary encoding",
                self.d_head
            )));
        }
        if self.vocab_size > 1 << 20 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} exceeds 2^20",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.num_heads / self.num_query_groups
    }

    pub fn q_width(&self) -> usize {
        self.num_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.num_query_groups * self.d_head
    }

    pub fn layer_params(&self) -> u64 {
        let d = self.d_model as u64;
        let attn = (2 * self.q_width() as u64 + 2 * self.kv_width() as u64) * d;
        let mlp = 2 * self.d_hidden as u64 * d;
        let norms = 4 * d;
        attn + mlp + norms
    }

    /// Does not validate, so a zero-layer config counts embeddings only.
    pub fn count_params(&self) -> ParamCount {
        let d = self.d_model as u64;
        let non_embedding = self.num_layers as u64 * self.layer_params() + 2 * d;
        let tables = if self.tie_embeddings { 1 } else { 2 };
        ParamCount {
            total: non_embedding + tables * self.vocab_size as u64 * d,
            non_embedding,
        }
    }

    /// Training FLOPs per optimizer step, estimated as `6 · params · tokens`
    /// (forward plus backward). Attention score FLOPs are not included.
    pub fn count_flops_per_step(&self, batch: usize, seq: usize) -> f64 {
        6.0 * self.count_params().total as f64 * batch as f64 * seq as f64
    }
}
