//! Adam with cosine decay, shared by distillation and conventional training.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::DistillConfig;
use super::loss::{total_loss_graph, LossValues, SharedProjection};
use super::{DistillError, Result};
use crate::io::{atomic_write, save_checkpoint, BatchSampler};
use crate::{Float, Graph, Model, Tape, Tensor, TensorError, TokenBatch};

fn default_beta2() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "TrainOptions::default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "TrainOptions::default_eps")]
    pub eps: f64,
    /// Evaluate every this many steps; `0` evaluates only after the last step.
    #[serde(default)]
    pub eval_every: usize,
    /// Where a diverged run writes its state. Defaults to the system temp dir.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl TrainOptions {
    fn default_beta1() -> f64 {
        0.9
    }

    fn default_eps() -> f64 {
        1e-8
    }

    /// Toy-scale schedule: 1e-3 decaying to 1e-5.
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            lr_max: 1e-3,
            lr_min: 1e-5,
            warmup_steps: 0,
            grad_clip: Some(1.0),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_every: 0,
            dump_dir: None,
        }
    }

    /// Full-scale endpoints, 2e-4 decaying to 4.5e-7.
    pub fn reference(steps: usize) -> Self {
        Self {
            lr_max: 2e-4,
            lr_min: 4.5e-7,
            ..Self::toy(steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_max.is_finite()
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr_max
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(DistillError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup to `max`, then cosine decay reaching `min` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, max: f64, min: f64) -> f64 {
    if step < warmup {
        return max * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Float> {
    pub step: usize,
    pub tokens: u64,
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> TrainState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            step: 0,
            tokens: 0,
            lr: 0.0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64, opts: &TrainOptions) {
        self.step += 1;
        self.lr = lr;
        let (b1, b2) = (opts.beta1, opts.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::from_f64c(b1), T::from_f64c(b2));
        let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
        let step_size = T::from_f64c(lr / c1);
        let inv_c2 = T::from_f64c(1.0 / c2);
        let eps = T::from_f64c(opts.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = tb1 * *mi + ob1 * gi;
                *vi = tb2 * *vi + ob2 * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub tokens: u64,
    #[serde(flatten)]
    pub loss: LossValues,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Float> {
    pub student: Model<T>,
    pub projection: Option<SharedProjection<T>>,
    pub metrics: Vec<StepMetrics>,
    pub state: TrainState<T>,
}

impl<T: Float> TrainOutput<T> {
    pub fn final_eval(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.eval_loss)
    }

    /// `(step, eval_loss)` for every evaluated step.
    pub fn eval_curve(&self) -> Vec<(usize, f64)> {
        self.metrics.iter().filter_map(|m| m.eval_loss.map(|e| (m.step, e))).collect()
    }
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    atomic_write(path, |f| {
        for m in metrics {
            serde_json::to_writer(&mut *f, m)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(())
}

fn clip<T: Float>(grads: &mut [Tensor<T>], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().to_f64c()).sum::<f64>().sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let s = T::from_f64c(c / norm);
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

fn dump_state<T: Float>(
    dir: &Path,
    step: usize,
    student: &Model<T>,
    metrics: &[StepMetrics],
) -> std::result::Result<PathBuf, crate::io::IoError> {
    std::fs::create_dir_all(dir).map_err(|e| crate::io::IoError::io(dir, e))?;
    let path = dir.join(format!("diverged-step{step}.mtrf"));
    save_checkpoint(student, &path)?;
    write_metrics_jsonl(&dir.join(format!("diverged-step{step}.jsonl")), metrics).map_err(|e| match e {
        DistillError::Io(e) => e,
        other => crate::io::IoError::Header(other.to_string()),
    })?;
    Ok(path)
}

fn train_loop<T: Float>(
    teacher: Option<&Model<T>>,
    student: Model<T>,
    data: &mut BatchSampler,
    cfg: &DistillConfig,
    opts: &TrainOptions,
    eval: &[TokenBatch],
) -> Result<TrainOutput<T>> {
    opts.validate()?;
    if let Some(t) = teacher {
        cfg.validate(&t.config, &student.config)?;
    }
    let mut student = student;
    let mut projection = match teacher {
        Some(t) if !cfg.is_components.is_empty() => Some(SharedProjection::<T>::truncated_identity(
            student.config.d_model,
            t.config.d_model,
        )),
        _ => None,
    };
    let mut state = {
        let mut all: Vec<&Tensor<T>> = student.params.iter().collect();
        all.extend(projection.as_ref().map(|p| &p.weight));
        TrainState::new(&all)
    };
    let mut metrics = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch = data.next_batch();
        let mut tape = Tape::<T>::new();
        let vars = student.params.map(|t| tape.param(t));
        let pvar = projection.as_ref().map(|p| tape.param(&p.weight));
        let diverged = |metrics: &[StepMetrics]| {
            let dir = opts.dump_dir.clone().unwrap_or_else(std::env::temp_dir);
            let dump = dump_state(&dir, step, &student, metrics).ok();
            DistillError::Diverged { step, dump }
        };
        let lg = match total_loss_graph(&mut tape, &batch, teacher, &student.config, &vars, pvar.as_ref(), cfg) {
            Ok(lg) if lg.values.total.is_finite() => lg,
            Ok(_) => return Err(diverged(&metrics)),
            Err(e) if e.is_non_finite() => return Err(diverged(&metrics)),
            Err(e) => return Err(e),
        };
        let grads = match tape.backward(&lg.total) {
            Err(TensorError::NonFinite { .. }) => return Err(diverged(&metrics)),
            other => other?,
        };
        let mut gs: Vec<Tensor<T>> = vars
            .iter()
            .zip(student.params.iter())
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        if let (Some(v), Some(p)) = (&pvar, &projection) {
            gs.push(grads.get_or_zeros(v, &p.weight));
        }
        let grad_norm = clip(&mut gs, opts.grad_clip);
        let lr = cosine_lr(step, opts.steps, opts.warmup_steps, opts.lr_max, opts.lr_min);
        {
            let mut all: Vec<&mut Tensor<T>> = student.params.iter_mut().collect();
            all.extend(projection.as_mut().map(|p| &mut p.weight));
            state.adam_step(&mut all, &gs, lr, opts);
        }
        state.tokens += (batch.batch * batch.seq) as u64;
        let last = step + 1 == opts.steps;
        let due = last || (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0);
        let eval_loss = if due && !eval.is_empty() {
            Some(student.mean_nll(eval)?)
        } else {
            None
        };
        metrics.push(StepMetrics {
            step: step + 1,
            lr,
            tokens: state.tokens,
            loss: lg.values,
            grad_norm,
            eval_loss,
        });
    }
    Ok(TrainOutput {
        student,
        projection,
        metrics,
        state,
    })
}

/// Trains `student` against a frozen `teacher` under `cfg`.
pub fn distill_loop<T: Float>(
    teacher: &Model<T>,
    student: Model<T>,
    data: &mut BatchSampler,
    cfg: &DistillConfig,
    opts: &TrainOptions,
    eval: &[TokenBatch],
) -> Result<TrainOutput<T>> {
    train_loop(Some(teacher), student, data, cfg, opts, eval)
}

/// The same loop on next-token loss alone.
pub fn conventional_loop<T: Float>(
    student: Model<T>,
    data: &mut BatchSampler,
    opts: &TrainOptions,
    eval: &[TokenBatch],
) -> Result<TrainOutput<T>> {
    train_loop(None, student, data, &DistillConfig::conventional(), opts, eval)
}
