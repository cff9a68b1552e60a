//! Pre-norm decoder-only transformer with grouped-query attention.
//!
//! Each block computes `x + MHA(LN₁(x))` followed by `x + MLP(LN₂(x))`, where
//! `MLP(h) = δ(h · W₁ᵀ) · W₂` with the squared-ReLU nonlinearity δ. Queries
//! and keys carry rotary position encoding. A block whose `W^O` and `W₂` are
//! zero is an exact pass-through.

mod config;
mod record;

pub use config::{ModelConfig, ParamCount};
pub use record::{ActivationRecord, CaptureSpec, LayerRecord};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Eager, Graph};
use crate::kernels::{AttnShape, HeadLayout};
use crate::tensor::{Float, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {seq} exceeds max_seq_len {max}")]
    SequenceTooLong { seq: usize, max: usize },
    #[error("token id {id} out of range for vocabulary {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("tensor {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("empty dataset")]
    EmptyData,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A batch of equal-length token sequences, row-major `[batch × seq]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Self {
        assert_eq!(ids.len(), batch * seq, "token batch shape");
        Self { batch, seq, ids }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let seq = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == seq), "ragged token rows");
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    /// Splits into next-token inputs (`[.., :-1]`) and flattened targets (`[.., 1:]`).
    pub fn shifted(&self) -> Result<(TokenBatch, Vec<usize>), ModelError> {
        if self.seq < 2 || self.batch == 0 {
            return Err(ModelError::EmptyData);
        }
        let mut inputs = Vec::with_capacity(self.batch * (self.seq - 1));
        let mut targets = Vec::with_capacity(self.batch * (self.seq - 1));
        for b in 0..self.batch {
            let row = self.row(b);
            inputs.extend_from_slice(&row[..self.seq - 1]);
            targets.extend(row[1..].iter().map(|&t| t as usize));
        }
        Ok((TokenBatch::new(self.batch, self.seq - 1, inputs), targets))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<V> {
    pub ln1_gamma: V,
    pub ln1_beta: V,
    /// `[num_heads·d_head × d_model]`
    pub wq: V,
    /// `[num_query_groups·d_head × d_model]`
    pub wk: V,
    pub wv: V,
    /// `[num_heads·d_head × d_model]`, applied as `attn · W^O`.
    pub wo: V,
    pub ln2_gamma: V,
    pub ln2_beta: V,
    /// `[d_hidden × d_model]`, applied as `h · W₁ᵀ`.
    pub w1: V,
    /// `[d_hidden × d_model]`, applied as `δ(·) · W₂`.
    pub w2: V,
}

impl<V> LayerParams<V> {
    const NAMES: [&'static str; 10] = [
        "ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gamma", "ln2.beta",
        "mlp.w1", "mlp.w2",
    ];

    fn fields(&self) -> [&V; 10] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.w2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut V; 10] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.w2,
        ]
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&V) -> Result<U, E>) -> Result<LayerParams<U>, E> {
        Ok(LayerParams {
            ln1_gamma: f(&self.ln1_gamma)?,
            ln1_beta: f(&self.ln1_beta)?,
            wq: f(&self.wq)?,
            wk: f(&self.wk)?,
            wv: f(&self.wv)?,
            wo: f(&self.wo)?,
            ln2_gamma: f(&self.ln2_gamma)?,
            ln2_beta: f(&self.ln2_beta)?,
            w1: f(&self.w1)?,
            w2: f(&self.w2)?,
        })
    }
}

/// The full weight set, generic over how a tensor is held (owned tensor,
/// tape handle, gradient, optimizer moment...).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<V> {
    /// `[vocab × d_model]`
    pub embedding: V,
    pub layers: Vec<LayerParams<V>>,
    pub final_gamma: V,
    pub final_beta: V,
    /// `[vocab × d_model]`; absent when embeddings are tied.
    pub head: Option<V>,
}

impl<V> ModelParams<V> {
    /// Parameters with stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &V)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, v) in LayerParams::<V>::NAMES.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), v));
            }
        }
        out.push(("final_norm.gamma".to_string(), &self.final_gamma));
        out.push(("final_norm.beta".to_string(), &self.final_beta));
        if let Some(h) = &self.head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &V> {
        self.named().into_iter().map(|(_, v)| v)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut V> {
        let mut out: Vec<&mut V> = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out.into_iter()
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&V) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            embedding: f(&self.embedding)?,
            layers: self
                .layers
                .iter()
                .map(|l| l.try_map(&mut f))
                .collect::<Result<_, _>>()?,
            final_gamma: f(&self.final_gamma)?,
            final_beta: f(&self.final_beta)?,
            head: self.head.as_ref().map(&mut f).transpose()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> ModelParams<U> {
        self.try_map(|v| Ok::<_, std::convert::Infallible>(f(v)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Expected tensor shapes for `config`, in checkpoint order.
pub fn expected_shapes(config: &ModelConfig) -> ModelParams<Vec<usize>> {
    let d = config.d_model;
    let layer = LayerParams {
        ln1_gamma: vec![d],
        ln1_beta: vec![d],
        wq: vec![config.q_width(), d],
        wk: vec![config.kv_width(), d],
        wv: vec![config.kv_width(), d],
        wo: vec![config.q_width(), d],
        ln2_gamma: vec![d],
        ln2_beta: vec![d],
        w1: vec![config.d_hidden, d],
        w2: vec![config.d_hidden, d],
    };
    ModelParams {
        embedding: vec![config.vocab_size, d],
        layers: vec![layer; config.num_layers],
        final_gamma: vec![d],
        final_beta: vec![d],
        head: (!config.tie_embeddings).then(|| vec![config.vocab_size, d]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

/// Output of [`forward_graph`].
pub struct ForwardOut<V> {
    /// `[batch·seq × vocab]`
    pub logits: V,
    pub record: ActivationRecord<V>,
}

impl<T: Float> Model<T> {
    /// Normal(0, 0.02) projections and embeddings, unit LayerNorm gains,
    /// zero biases. Deterministic per seed and identical in value across
    /// precisions up to rounding.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let shapes = expected_shapes(&config);
        let mut init = |shape: &Vec<usize>, kind: Init| -> Tensor<T> {
            match kind {
                Init::Normal => {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| T::from_f64c(normal.sample(&mut rng))).collect();
                    Tensor::new(shape.clone(), data).expect("shape")
                }
                Init::Ones => Tensor::ones(shape),
                Init::Zeros => Tensor::zeros(shape),
            }
        };
        let layers = shapes
            .layers
            .iter()
            .map(|s| LayerParams {
                ln1_gamma: init(&s.ln1_gamma, Init::Ones),
                ln1_beta: init(&s.ln1_beta, Init::Zeros),
                wq: init(&s.wq, Init::Normal),
                wk: init(&s.wk, Init::Normal),
                wv: init(&s.wv, Init::Normal),
                wo: init(&s.wo, Init::Normal),
                ln2_gamma: init(&s.ln2_gamma, Init::Ones),
                ln2_beta: init(&s.ln2_beta, Init::Zeros),
                w1: init(&s.w1, Init::Normal),
                w2: init(&s.w2, Init::Normal),
            })
            .collect();
        let embedding = init(&shapes.embedding, Init::Normal);
        let final_gamma = init(&shapes.final_gamma, Init::Ones);
        let final_beta = init(&shapes.final_beta, Init::Zeros);
        let head = shapes.head.as_ref().map(|s| init(s, Init::Normal));
        Ok(Self {
            config,
            params: ModelParams {
                embedding,
                layers,
                final_gamma,
                final_beta,
                head,
            },
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_params(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.head.is_some() != params.head.is_some() || expected.layers.len() != params.layers.len() {
            return Err(ModelError::InvalidConfig(
                "parameter set does not match layer count or embedding tying".into(),
            ));
        }
        for ((name, exp), (_, t)) in expected.named().into_iter().zip(params.named()) {
            if exp.as_slice() != t.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: exp.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.map(|t| t.cast()),
        }
    }

    pub fn num_params(&self) -> u64 {
        self.params.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn check_tokens(&self, tokens: &TokenBatch) -> Result<(), ModelError> {
        if tokens.batch == 0 || tokens.seq == 0 {
            return Err(ModelError::EmptyData);
        }
        if tokens.seq > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                seq: tokens.seq,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Gradient-free forward pass. Returns logits `[batch·seq × vocab]`.
    pub fn forward(
        &self,
        tokens: &TokenBatch,
        capture: &CaptureSpec,
    ) -> Result<(Tensor<T>, ActivationRecord<Tensor<T>>), ModelError> {
        self.check_tokens(tokens)?;
        let mut g = Eager;
        let out = forward_graph(&mut g, &self.config, &self.params, tokens, capture)?;
        Ok((out.logits, out.record))
    }

    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward(tokens, &CaptureSpec::none())?.0)
    }

    /// Mean next-token negative log-likelihood over the batch.
    pub fn lm_loss(&self, batch: &TokenBatch) -> Result<f64, ModelError> {
        let (inputs, targets) = batch.shifted()?;
        let logits = self.logits(&inputs)?;
        let loss = Eager.cross_entropy(&logits, &targets)?;
        Ok(loss.item().to_f64c())
    }

    /// `exp` of the token-weighted mean negative log-likelihood.
    pub fn perplexity(&self, data: &[TokenBatch]) -> Result<f64, ModelError> {
        Ok(self.mean_nll(data)?.exp())
    }

    /// Token-weighted mean LM loss across batches.
    pub fn mean_nll(&self, data: &[TokenBatch]) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::EmptyData);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for b in data {
            let n = b.batch * (b.seq.saturating_sub(1));
            total += self.lm_loss(b)? * n as f64;
            count += n;
        }
        Ok(total / count as f64)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// The transformer forward pass over any [`Graph`] executor.
pub fn forward_graph<T: Float, G: Graph<T>>(
    g: &mut G,
    config: &ModelConfig,
    params: &ModelParams<G::Value>,
    tokens: &TokenBatch,
    capture: &CaptureSpec,
) -> Result<ForwardOut<G::Value>, ModelError> {
    let eps = T::from_f64c(LN_EPS);
    let (batch, seq) = (tokens.batch, tokens.seq);
    let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
    let q_layout = HeadLayout {
        batch,
        seq,
        heads: config.num_heads,
        d_head: config.d_head,
    };
    let k_layout = HeadLayout {
        heads: config.num_query_groups,
        ..q_layout
    };
    let attn_shape = AttnShape {
        batch,
        seq,
        heads: config.num_heads,
        groups: config.num_query_groups,
        d_head: config.d_head,
    };

    let mut x = g.embedding(&params.embedding, &ids)?;
    let mut record = ActivationRecord {
        batch,
        seq,
        layers: Vec::with_capacity(params.layers.len()),
        block_inputs: Vec::new(),
        final_norm_out: None,
    };
    for layer in &params.layers {
        let mut rec = LayerRecord::default();
        if capture.blocks {
            record.block_inputs.push(x.clone());
        }
        let h = g.layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta, eps)?;
        let q = g.matmul_t(&h, &layer.wq)?;
        let k = g.matmul_t(&h, &layer.wk)?;
        let v = g.matmul_t(&h, &layer.wv)?;
        let q = g.rope(&q, q_layout, ROPE_BASE)?;
        let k = g.rope(&k, k_layout, ROPE_BASE)?;
        let attn = g.attention(&q, &k, &v, attn_shape)?;
        let attn_proj = g.matmul(&attn, &layer.wo)?;
        x = g.add(&x, &attn_proj)?;

        let h2 = g.layer_norm(&x, &layer.ln2_gamma, &layer.ln2_beta, eps)?;
        let pre = g.matmul_t(&h2, &layer.w1)?;
        let post = g.relu_sq(&pre)?;
        let mlp = g.matmul(&post, &layer.w2)?;
        x = g.add(&x, &mlp)?;

        if capture.norms {
            rec.ln1_out = Some(h);
            rec.ln2_out = Some(h2);
        }
        if capture.heads {
            rec.head_out = Some(attn);
        }
        if capture.neurons {
            rec.mlp_pre = Some(pre);
            rec.mlp_post = Some(post);
        }
        if capture.qkv {
            rec.q = Some(q);
            rec.k = Some(k);
            rec.v = Some(v);
        }
        record.layers.push(rec);
    }
    if capture.blocks {
        record.block_inputs.push(x.clone());
    }
    let hf = g.layer_norm(&x, &params.final_gamma, &params.final_beta, eps)?;
    let head = params.head.as_ref().unwrap_or(&params.embedding);
    let logits = g.matmul_t(&hf, head)?;
    if capture.norms {
        record.final_norm_out = Some(hf);
    }
    Ok(ForwardOut { logits, record })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 16,
            num_heads: 4,
            num_query_groups: 2,
            d_head: 4,
            d_hidden: 32,
            vocab_size: 24,
            max_seq_len: 8,
            tie_embeddings: false,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f32>::build(ModelConfig::toy(), 7).unwrap();
        let b = Model::<f32>::build(ModelConfig::toy(), 7).unwrap();
        assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.bit_eq(y)));
        let c = Model::<f32>::build(ModelConfig::toy(), 8).unwrap();
        assert!(!a.params.embedding.bit_eq(&c.params.embedding));
    }

    #[test]
    fn tied_model_has_no_head() {
        let mut cfg = tiny();
        cfg.tie_embeddings = true;
        let m = Model::<f32>::build(cfg, 1).unwrap();
        assert!(m.params.head.is_none());
        assert_eq!(m.num_params(), cfg.count_params().total);
    }

    #[test]
    fn toy_param_count_matches_config() {
        let m = Model::<f32>::build(ModelConfig::toy(), 0).unwrap();
        assert_eq!(m.num_params(), ModelConfig::toy().count_params().total);
    }

    #[test]
    fn single_token_logits_shape() {
        let m = Model::<f32>::build(tiny(), 3).unwrap();
        let logits = m.logits(&TokenBatch::new(1, 1, vec![5])).unwrap();
        assert_eq!(logits.shape(), &[1, 24]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::build(tiny(), 3).unwrap();
        assert!(matches!(
            m.logits(&TokenBatch::new(1, 9, vec![0; 9])),
            Err(ModelError::SequenceTooLong { seq: 9, max: 8 })
        ));
        assert!(matches!(
            m.logits(&TokenBatch::new(1, 2, vec![0, 24])),
            Err(ModelError::BadToken { id: 24, .. })
        ));
    }

    #[test]
    fn capture_respects_spec() {
        let m = Model::<f32>::build(tiny(), 3).unwrap();
        let tokens = TokenBatch::new(2, 3, vec![1, 2, 3, 4, 5, 6]);
        let (_, rec) = m.forward(&tokens, &CaptureSpec::none()).unwrap();
        assert!(rec.block_inputs.is_empty());
        assert!(rec.layers.iter().all(|l| l.head_out.is_none() && l.ln1_out.is_none()));
        let cap = CaptureSpec {
            heads: true,
            ..CaptureSpec::none()
        };
        let (_, rec) = m.forward(&tokens, &cap).unwrap();
        assert_eq!(rec.layers[1].head_out.as_ref().unwrap().shape(), &[6, 16]);
        assert!(rec.layers[1].mlp_pre.is_none());
    }

    #[test]
    fn shift_splits_inputs_and_targets() {
        let b = TokenBatch::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]]);
        let (inp, tgt) = b.shifted().unwrap();
        assert_eq!(inp.ids, vec![1, 2, 4, 5]);
        assert_eq!(tgt, vec![2, 3, 5, 6]);
    }
}
