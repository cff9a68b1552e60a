#![allow(dead_code)]

pub mod reference;

use prunekit::autodiff::{Eager, Graph, Tape};
use prunekit::tensor::Tensor;
use prunekit::{Model, ModelConfig, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A scalar function of some tensors, written once for every executor.
pub trait LossFn {
    fn eval<G: Graph<f64>>(&self, g: &mut G, p: &[G::Value]) -> G::Value;
}

/// `Σ out ⊙ W` for a fixed pseudo-random `W`, so gradients are not trivially uniform.
pub fn weighted_sum<G: Graph<f64>>(g: &mut G, out: &G::Value, seed: u64) -> G::Value {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random_tensor(&shape, 1.0, seed));
    let prod = g.mul(out, &w).unwrap();
    g.sum(&prod).unwrap()
}

pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(1e-12);
    diff / scale
}

pub fn eval_eager<L: LossFn>(l: &L, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Eager;
    let p: Vec<Tensor<f64>> = inputs.to_vec();
    l.eval(&mut g, &p).item()
}

/// Central finite differences for every element of every input.
pub fn numeric_grads<L: LossFn>(l: &L, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval_eager(l, &work);
            work[i].data_mut()[j] = orig - h;
            let fm = eval_eager(l, &work);
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

pub fn analytic_grads<L: LossFn>(l: &L, inputs: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = l.eval(&mut tape, &vars);
    let grads = tape.backward(&loss).unwrap();
    vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(v, t)).collect()
}

/// Largest relative error over inputs between tape and finite-difference gradients.
pub fn grad_check<L: LossFn>(l: &L, inputs: &[Tensor<f64>]) -> f64 {
    let a = analytic_grads(l, inputs);
    let n = numeric_grads(l, inputs, 1e-3);
    a.iter().zip(&n).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

pub fn tiny(groups: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 4,
        num_query_groups: groups,
        d_head: 4,
        d_hidden: 32,
        vocab_size: 24,
        max_seq_len: 16,
        tie_embeddings: false,
    }
}

/// Random weights large enough that every nonlinearity is exercised.
pub fn random_model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let base = Model::<f64>::build(cfg, seed).unwrap();
    let mut k = seed * 1000;
    let params = base.params.map(|t| {
        k += 1;
        let noise = random_tensor(t.shape(), 0.3, k);
        if t.rank() == 1 {
            noise.map(|v| 1.0 + v)
        } else {
            noise
        }
    });
    Model::from_params(cfg, params).unwrap()
}

pub fn random_tokens(batch: usize, seq: usize, vocab: usize, seed: u64) -> TokenBatch {
    let mut r = rng(seed);
    TokenBatch::new(batch, seq, (0..batch * seq).map(|_| r.random_range(0..vocab as u32)).collect())
}

