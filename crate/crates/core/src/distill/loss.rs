//! Distillation objectives, written once over [`Graph`] so the same code
//! yields values (eager) and gradients (tape).

use log::warn;

use super::config::{AlphaMode, DistillConfig, IsComponent, IsLossFn, LogitLoss};
use super::{DistillError, Result};
use crate::kernels::HeadLayout;
use crate::model::{forward_graph, ActivationRecord, ModelParams};
use crate::{CaptureSpec, Eager, Float, Graph, Model, ModelConfig, Tensor, TokenBatch};

/// `softmax(logits / τ)` along the trailing axis.
pub fn softmax_t<T: Float>(logits: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if !(tau > 0.0) {
        return Err(DistillError::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut g = Eager;
    let scaled = g.scale(logits, T::from_f64c(1.0 / tau))?;
    Ok(g.softmax(&scaled)?)
}

/// Teacher's top-`k` ids per row, ascending within the row, so that `k = V`
/// gathers every column in its original order.
pub fn top_k_indices<T: Float>(teacher: &Tensor<T>, k: usize) -> Vec<usize> {
    let v = teacher.cols();
    let mut out = Vec::with_capacity(teacher.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(v);
    for r in 0..teacher.rows() {
        let row = teacher.row(r);
        order.clear();
        order.extend(0..v);
        if k < v {
            order.select_nth_unstable_by(k - 1, |&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
        }
        out.extend_from_slice(&order);
    }
    out
}

/// Per-token `Loss(p_t, p_s)` averaged over every row.
pub fn logit_loss_graph<T: Float, G: Graph<T>>(
    g: &mut G,
    teacher_logits: &Tensor<T>,
    student_logits: &G::Value,
    cfg: &DistillConfig,
) -> Result<G::Value> {
    let s_shape = g.value(student_logits).shape().to_vec();
    if s_shape != teacher_logits.shape() {
        return Err(DistillError::Shape(format!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            s_shape
        )));
    }
    let rows = teacher_logits.rows();
    let (t, s) = match cfg.top_k {
        Some(k) => {
            let idx = top_k_indices(teacher_logits, k);
            (Eager.gather_cols(teacher_logits, &idx, k)?, g.gather_cols(student_logits, &idx, k)?)
        }
        None => (teacher_logits.clone(), student_logits.clone()),
    };
    let inv_tau = T::from_f64c(1.0 / cfg.temperature);
    let t = Eager.scale(&t, inv_tau)?;
    let s = g.scale(&s, inv_tau)?;
    let per_row = T::from_f64c(1.0 / rows as f64);
    Ok(match cfg.logit_loss {
        LogitLoss::Kld => g.kl_div_logits(&s, &t)?,
        LogitLoss::Rkld => {
            let lt = g.constant(Eager.log_softmax(&t)?);
            let ls = g.log_softmax(&s)?;
            let ps = g.softmax(&s)?;
            let diff = g.sub(&ls, &lt)?;
            let prod = g.mul(&ps, &diff)?;
            let total = g.sum(&prod)?;
            g.scale(&total, per_row)?
        }
        LogitLoss::Mse => {
            let ps = g.softmax(&s)?;
            let w = g.constant(Eager.softmax(&t)?);
            let diff = g.sub(&ps, &w)?;
            let sq = g.square(&diff)?;
            g.mean(&sq)?
        }
        LogitLoss::Cosine => {
            let ps = g.softmax(&s)?;
            let w = g.constant(Eager.softmax(&t)?);
            one_minus_mean_cos(g, &w, &ps)?
        }
    })
}

fn one_minus_mean_cos<T: Float, G: Graph<T>>(g: &mut G, a: &G::Value, b: &G::Value) -> Result<G::Value> {
    let cos = g.cosine_rows(a, b)?;
    let m = g.mean(&cos)?;
    let neg = g.scale(&m, -T::one())?;
    Ok(g.add_scalar(&neg, T::one())?)
}

/// Upscales student hidden states into the teacher's width. One instance is
/// shared by every mapped state.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjection<T: Float> {
    /// `[d_student × d_teacher]`
    pub weight: Tensor<T>,
}

impl<T: Float> SharedProjection<T> {
    /// Student channel `i` maps onto teacher channel `i`.
    pub fn truncated_identity(d_student: usize, d_teacher: usize) -> Self {
        let mut w = Tensor::zeros(&[d_student, d_teacher]);
        for i in 0..d_student.min(d_teacher) {
            w.row_mut(i)[i] = T::one();
        }
        Self { weight: w }
    }

    pub fn cast<U: Float>(&self) -> SharedProjection<U> {
        SharedProjection {
            weight: self.weight.cast(),
        }
    }
}

fn state_loss<T: Float, G: Graph<T>>(
    g: &mut G,
    teacher: &Tensor<T>,
    student: &G::Value,
    projection: &G::Value,
    f: IsLossFn,
) -> Result<G::Value> {
    let mapped = g.matmul(student, projection)?;
    if g.value(&mapped).shape() != teacher.shape() {
        return Err(DistillError::Shape(format!(
            "projected student state {:?} vs teacher {:?}",
            g.value(&mapped).shape(),
            teacher.shape()
        )));
    }
    let t = g.constant(teacher.clone());
    Ok(match f {
        IsLossFn::Cosine => one_minus_mean_cos(g, &t, &mapped)?,
        IsLossFn::Mse => {
            let d = g.sub(&mapped, &t)?;
            let sq = g.square(&d)?;
            g.mean(&sq)?
        }
    })
}

/// KLD between row-softmaxed causal self-relations, averaged over rows.
fn relation_loss<T: Float, G: Graph<T>>(
    g: &mut G,
    teacher: &Tensor<T>,
    student: &G::Value,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<G::Value> {
    let layout = |w: usize| HeadLayout {
        batch,
        seq,
        heads,
        d_head: w / heads,
    };
    let tl = layout(teacher.cols());
    let sl = layout(g.value(student).cols());
    let rt = Eager.relation(teacher, tl)?;
    let rs = g.relation(student, sl)?;
    Ok(g.kl_div_logits(&rs, &rt)?)
}

fn missing(what: &str) -> DistillError {
    DistillError::Shape(format!("{what} was not captured"))
}

/// `L_is`: the sum over requested components and mapped layer pairs.
/// Returns `None` when no component is requested.
pub fn intermediate_loss_graph<T: Float, G: Graph<T>>(
    g: &mut G,
    teacher: &ActivationRecord<Tensor<T>>,
    student: &ActivationRecord<G::Value>,
    projection: &G::Value,
    cfg: &DistillConfig,
) -> Result<Option<G::Value>> {
    let mut terms = Vec::new();
    for comp in &cfg.is_components {
        match comp {
            IsComponent::Emb => {
                let t = teacher.normed_embedding().ok_or_else(|| missing("teacher embedding norm"))?;
                let s = student.normed_embedding().ok_or_else(|| missing("student embedding norm"))?;
                terms.push(state_loss(g, t, s, projection, cfg.is_loss_fn)?);
            }
            IsComponent::O | IsComponent::I => {
                for p in &cfg.layer_map {
                    let (t, s) = if *comp == IsComponent::O {
                        (teacher.normed_block_output(p.teacher), student.normed_block_output(p.student))
                    } else {
                        (
                            teacher.layers.get(p.teacher).and_then(|l| l.ln2_out.as_ref()),
                            student.layers.get(p.student).and_then(|l| l.ln2_out.as_ref()),
                        )
                    };
                    let t = t.ok_or_else(|| missing("teacher layer state"))?;
                    let s = s.ok_or_else(|| missing("student layer state"))?;
                    terms.push(state_loss(g, t, s, projection, cfg.is_loss_fn)?);
                }
            }
            IsComponent::Att => {
                for p in &cfg.layer_map {
                    let tl = teacher.layers.get(p.teacher).ok_or_else(|| missing("teacher layer"))?;
                    let sl = student.layers.get(p.student).ok_or_else(|| missing("student layer"))?;
                    for (t, s) in [(&tl.q, &sl.q), (&tl.k, &sl.k), (&tl.v, &sl.v)] {
                        let t = t.as_ref().ok_or_else(|| missing("teacher q/k/v"))?;
                        let s = s.as_ref().ok_or_else(|| missing("student q/k/v"))?;
                        terms.push(relation_loss(g, t, s, teacher.batch, teacher.seq, cfg.relation_heads)?);
                    }
                }
            }
        }
    }
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for t in it {
        acc = g.add(&acc, &t)?;
    }
    Ok(Some(acc))
}

/// Scalar values of every loss component at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub clm: f64,
    pub logits: f64,
    pub is: f64,
    pub alpha: f64,
    /// The weighted intermediate term exactly as it enters `total`.
    pub alpha_is: f64,
}

pub struct LossGraph<V> {
    pub total: V,
    pub values: LossValues,
}

pub fn capture_for(cfg: &DistillConfig) -> CaptureSpec {
    let c = &cfg.is_components;
    CaptureSpec {
        norms: c.iter().any(|x| *x != IsComponent::Att),
        qkv: c.contains(&IsComponent::Att),
        ..CaptureSpec::none()
    }
}

/// `L = L_CLM + L_logits + α·L_is` for one batch.
///
/// Under dynamic α the weighted term is built as
/// `α·(L_is − stop(L_is)) + stop(L_logits)`: its gradient is `α·∇L_is` and
/// its value is `L_logits` bit for bit, which is what `α·L_is` equals in
/// exact arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_graph<T: Float, G: Graph<T>>(
    g: &mut G,
    batch: &TokenBatch,
    teacher: Option<&Model<T>>,
    student_cfg: &ModelConfig,
    student: &ModelParams<G::Value>,
    projection: Option<&G::Value>,
    cfg: &DistillConfig,
) -> Result<LossGraph<G::Value>> {
    let (inputs, targets) = batch.shifted()?;
    let capture = capture_for(cfg);
    let out = forward_graph(g, student_cfg, student, &inputs, &capture)?;
    let mut values = LossValues::default();
    let mut parts: Vec<G::Value> = Vec::new();

    if cfg.use_clm {
        let clm = g.cross_entropy(&out.logits, &targets)?;
        values.clm = g.value(&clm).item().to_f64c();
        parts.push(clm);
    }
    if cfg.uses_teacher() {
        let teacher = teacher.ok_or_else(|| DistillError::Config("teacher required".into()))?;
        cfg.validate(&teacher.config, student_cfg)?;
        let (t_logits, t_rec) = teacher.forward(&inputs, &capture)?;
        let mut logit_term = None;
        if cfg.use_logits {
            let l = logit_loss_graph(g, &t_logits, &out.logits, cfg)?;
            values.logits = g.value(&l).item().to_f64c();
            logit_term = Some(l);
        }
        let is = match projection {
            Some(p) => intermediate_loss_graph(g, &t_rec, &out.record, p, cfg)?,
            None if cfg.is_components.is_empty() => None,
            None => return Err(DistillError::Config("intermediate loss needs a projection".into())),
        };
        if let Some(l) = logit_term {
            parts.push(l);
        }
        if let Some(is) = is {
            let is_val = g.value(&is).item();
            values.is = is_val.to_f64c();
            let term = match cfg.alpha_mode {
                AlphaMode::Constant(c) => {
                    values.alpha = c;
                    g.scale(&is, T::from_f64c(c))?
                }
                AlphaMode::Dynamic if values.is == 0.0 => {
                    warn!("intermediate loss is exactly zero; dynamic alpha set to 0");
                    g.scale(&is, T::zero())?
                }
                AlphaMode::Dynamic => {
                    values.alpha = values.logits / values.is;
                    let frozen = g.constant(Tensor::scalar(is_val));
                    let delta = g.sub(&is, &frozen)?;
                    let scaled = g.scale(&delta, T::from_f64c(values.alpha))?;
                    let target = g.constant(Tensor::scalar(T::from_f64c(values.logits)));
                    g.add(&scaled, &target)?
                }
            };
            values.alpha_is = g.value(&term).item().to_f64c();
            parts.push(term);
        }
    }
    let mut it = parts.into_iter();
    let mut total = it.next().ok_or_else(|| DistillError::Config("no loss term enabled".into()))?;
    for p in it {
        total = g.add(&total, &p)?;
    }
    values.total = g.value(&total).item().to_f64c();
    Ok(LossGraph { total, values })
}

/// Gradient-free evaluation of [`total_loss_graph`].
pub fn total_loss<T: Float>(
    batch: &TokenBatch,
    teacher: Option<&Model<T>>,
    student: &Model<T>,
    cfg: &DistillConfig,
    projection: Option<&SharedProjection<T>>,
) -> Result<LossValues> {
    let mut g = Eager;
    let p = projection.map(|p| p.weight.clone());
    Ok(total_loss_graph(&mut g, batch, teacher, &student.config, &student.params, p.as_ref(), cfg)?.values)
}

/// Teacher and student logits under `cfg`'s logit loss, outside any model.
pub fn logit_loss<T: Float>(teacher: &Tensor<T>, student: &Tensor<T>, cfg: &DistillConfig) -> Result<f64> {
    let mut g = Eager;
    Ok(logit_loss_graph(&mut g, teacher, student, cfg)?.item().to_f64c())
}

/// `L_is` between two models' records; `0` when no component is requested.
pub fn intermediate_loss<T: Float>(
    teacher: &ActivationRecord<Tensor<T>>,
    student: &ActivationRecord<Tensor<T>>,
    projection: &SharedProjection<T>,
    cfg: &DistillConfig,
) -> Result<f64> {
    let mut g = Eager;
    Ok(intermediate_loss_graph(&mut g, teacher, student, &projection.weight, cfg)?
        .map(|v| v.item().to_f64c())
        .unwrap_or(0.0))
}
