//! Reverse-mode differentiation.
//!
//! Model and loss code is written once against [`Graph`]. [`Eager`] evaluates
//! it directly and never records anything; [`Tape`] records every primitive so
//! [`Tape::backward`] can replay them in reverse. Both call the same kernels,
//! so a taped forward is bit-identical to an eager one.

mod eager;
mod tape;

pub use eager::Eager;
pub use tape::{tapes_created, Gradients, Tape, Var};

use crate::kernels::{AttnShape, HeadLayout};
use crate::tensor::{Float, Result, Tensor};

pub trait Graph<T: Float> {
    type Value: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    /// A trainable leaf.
    fn param(&mut self, t: &Tensor<T>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    /// `a[m×k] · b[k×n]`
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a[m×k] · b[n×k]ᵀ`, the `X · Wᵀ` form used by every projection.
    fn matmul_t(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: T) -> Result<Self::Value>;
    fn add_scalar(&mut self, a: &Self::Value, c: T) -> Result<Self::Value>;
    fn square(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// `max(x, 0)²`
    fn relu_sq(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Softmax over the trailing axis.
    fn softmax(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn log_softmax(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: T,
    ) -> Result<Self::Value>;
    /// Row lookup `table[ids[i]]`.
    fn embedding(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value>;
    /// Per-row column gather: `out[i, j] = x[i, idx[i·k + j]]`.
    fn gather_cols(&mut self, x: &Self::Value, idx: &[usize], k: usize) -> Result<Self::Value>;
    fn rope(&mut self, x: &Self::Value, layout: HeadLayout, base: f64) -> Result<Self::Value>;
    fn attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        shape: AttnShape,
    ) -> Result<Self::Value>;
    fn relation(&mut self, x: &Self::Value, layout: HeadLayout) -> Result<Self::Value>;
    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    fn cross_entropy(&mut self, logits: &Self::Value, targets: &[usize]) -> Result<Self::Value>;
    /// Mean over rows of `KL(softmax(teacher) ‖ softmax(logits))`. The
    /// gradient is `(p_s − p_t) / rows`, so it vanishes exactly when both
    /// rows hold the same values.
    fn kl_div_logits(&mut self, logits: &Self::Value, teacher: &Tensor<T>) -> Result<Self::Value>;
    /// Row-wise cosine similarity, output `[rows]`.
    fn cosine_rows(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
}

pub(crate) mod check {
    use crate::kernels::{AttnShape, HeadLayout};
    use crate::tensor::{Float, Result, Tensor, TensorError};

    pub fn finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    }

    pub fn rank2<T: Float>(op: &'static str, a: &Tensor<T>) -> Result<(usize, usize)> {
        if a.rank() == 2 {
            Ok((a.shape()[0], a.shape()[1]))
        } else {
            Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected rank 2, got {:?}", a.shape()),
            })
        }
    }

    pub fn matmul_dims<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (m, k) = rank2("matmul", a)?;
        let (k2, n) = rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((m, k, n))
    }

    pub fn matmul_t_dims<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (m, k) = rank2("matmul_t", a)?;
        let (n, k2) = rank2("matmul_t", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((m, k, n))
    }

    pub fn layer_norm<T: Float>(x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<()> {
        if !(eps > T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                msg: "eps must be positive".into(),
            });
        }
        if g.numel() != x.cols() || b.numel() != x.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn ids(op: &'static str, ids: &[usize], extent: usize) -> Result<()> {
        match ids.iter().find(|&&i| i >= extent) {
            Some(&index) => Err(TensorError::IndexOutOfRange { op, index, extent }),
            None => Ok(()),
        }
    }

    pub fn head_layout<T: Float>(op: &'static str, x: &Tensor<T>, l: HeadLayout) -> Result<()> {
        if x.rows() != l.rows() || x.cols() != l.width() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: vec![l.rows(), l.width()],
            });
        }
        Ok(())
    }

    pub fn attention<T: Float>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        sh: AttnShape,
    ) -> Result<()> {
        let rows = sh.batch * sh.seq;
        let bad = sh.groups == 0
            || sh.heads % sh.groups != 0
            || q.rows() != rows
            || q.cols() != sh.q_width()
            || k.shape() != v.shape()
            || k.rows() != rows
            || k.cols() != sh.kv_width();
        if bad {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        Ok(())
    }
}
