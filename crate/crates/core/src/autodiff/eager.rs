use super::{check, Graph};
use crate::kernels::{self, AttnShape, HeadLayout};
use crate::tensor::{Float, Result, Tensor, TensorError};

/// Gradient-free executor. Values are plain tensors.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

/// Forward computations shared with the tape.
pub(super) mod fwd {
    use super::*;

    pub fn finish<T: Float>(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
        check::finite(op, &data)?;
        Tensor::new(shape, data)
    }

    pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = check::matmul_dims(a, b)?;
        let mut c = vec![T::zero(); m * n];
        kernels::matmul_acc(a.data(), b.data(), &mut c, m, k, n);
        finish("matmul", vec![m, n], c)
    }

    pub fn matmul_t<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = check::matmul_t_dims(a, b)?;
        let mut c = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(a.data(), b.data(), &mut c, m, k, n);
        finish("matmul_t", vec![m, n], c)
    }

    pub fn zip<T: Float>(
        op: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        check::same_shape(op, a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        finish(op, a.shape().to_vec(), data)
    }

    pub fn unary<T: Float>(op: &'static str, a: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        finish(op, a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu_sq<T: Float>(x: T) -> T {
        if x > T::zero() {
            x * x
        } else {
            T::zero()
        }
    }

    pub fn layer_norm<T: Float>(
        x: &Tensor<T>,
        g: &Tensor<T>,
        b: &Tensor<T>,
        eps: T,
    ) -> Result<(Tensor<T>, kernels::LayerNormOut<T>)> {
        check::layer_norm(x, g, b, eps)?;
        let mut out = kernels::layer_norm(x.data(), g.data(), b.data(), eps);
        let y = std::mem::take(&mut out.y);
        Ok((finish("layer_norm", x.shape().to_vec(), y)?, out))
    }

    pub fn embedding<T: Float>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let (v, d) = check::rank2("embedding", table)?;
        check::ids("embedding", ids, v)?;
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: "no ids".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.row(i));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    pub fn gather_cols<T: Float>(x: &Tensor<T>, idx: &[usize], k: usize) -> Result<Tensor<T>> {
        let (rows, cols) = (x.rows(), x.cols());
        if k == 0 || idx.len() != rows * k {
            return Err(TensorError::InvalidArgument {
                op: "gather_cols",
                msg: format!("expected {} indices, got {}", rows * k, idx.len()),
            });
        }
        check::ids("gather_cols", idx, cols)?;
        let mut data = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = x.row(r);
            data.extend(idx[r * k..(r + 1) * k].iter().map(|&j| row[j]));
        }
        Tensor::new(vec![rows, k], data)
    }

    pub fn cross_entropy<T: Float>(logits: &Tensor<T>, targets: &[usize]) -> Result<(Tensor<T>, Vec<T>)> {
        let (rows, v) = (logits.rows(), logits.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        check::ids("cross_entropy", targets, v)?;
        let logp = kernels::log_softmax_rows(logits.data(), v);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            total -= logp[r * v + t];
        }
        let loss = total / T::from_usize(rows).unwrap();
        let probs = logp.iter().map(|&l| l.exp()).collect();
        Ok((finish("cross_entropy", vec![1], vec![loss])?, probs))
    }

    /// Returns the loss and both probability tables `(p_s, p_t)`.
    pub fn kl_div_logits<T: Float>(logits: &Tensor<T>, teacher: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        check::same_shape("kl_div_logits", logits, teacher)?;
        let (rows, v) = (logits.rows(), logits.cols());
        let ls = kernels::log_softmax_rows(logits.data(), v);
        let lt = kernels::log_softmax_rows(teacher.data(), v);
        let pt: Vec<T> = lt.iter().map(|&l| l.exp()).collect();
        let total: T = pt.iter().zip(lt.iter().zip(&ls)).map(|(&p, (&a, &b))| p * (a - b)).sum();
        let loss = total / T::from_usize(rows).unwrap();
        let ps = ls.iter().map(|&l| l.exp()).collect();
        Ok((finish("kl_div_logits", vec![1], vec![loss])?, ps, pt))
    }

    pub fn cosine_rows<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        check::same_shape("cosine_rows", a, b)?;
        let tiny = T::min_positive_value().sqrt();
        let data = (0..a.rows())
            .map(|r| {
                let (x, y) = (a.row(r), b.row(r));
                let nx = kernels::dot(x, x).sqrt().max(tiny);
                let ny = kernels::dot(y, y).sqrt().max(tiny);
                kernels::dot(x, y) / (nx * ny)
            })
            .collect();
        finish("cosine_rows", vec![a.rows()], data)
    }
}

impl<T: Float> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::matmul(a, b)
    }

    fn matmul_t(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::matmul_t(a, b)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::zip("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::zip("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::zip("mul", a, b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        fwd::unary("scale", a, |x| x * c)
    }

    fn add_scalar(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        fwd::unary("add_scalar", a, |x| x + c)
    }

    fn square(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::unary("square", a, |x| x * x)
    }

    fn relu_sq(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::unary("relu_sq", a, fwd::relu_sq)
    }

    fn softmax(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::finish("softmax", a.shape().to_vec(), kernels::softmax_rows(a.data(), a.cols()))
    }

    fn log_softmax(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::finish(
            "log_softmax",
            a.shape().to_vec(),
            kernels::log_softmax_rows(a.data(), a.cols()),
        )
    }

    fn layer_norm(&mut self, x: &Tensor<T>, g: &Tensor<T>, b: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        Ok(fwd::layer_norm(x, g, b, eps)?.0)
    }

    fn embedding(&mut self, table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        fwd::embedding(table, ids)
    }

    fn gather_cols(&mut self, x: &Tensor<T>, idx: &[usize], k: usize) -> Result<Tensor<T>> {
        fwd::gather_cols(x, idx, k)
    }

    fn rope(&mut self, x: &Tensor<T>, layout: HeadLayout, base: f64) -> Result<Tensor<T>> {
        check::head_layout("rope", x, layout)?;
        fwd::finish("rope", x.shape().to_vec(), kernels::rope(x.data(), layout, base, false))
    }

    fn attention(&mut self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, sh: AttnShape) -> Result<Tensor<T>> {
        check::attention(q, k, v, sh)?;
        let (out, _) = kernels::attention(q.data(), k.data(), v.data(), sh);
        fwd::finish("attention", q.shape().to_vec(), out)
    }

    fn relation(&mut self, x: &Tensor<T>, layout: HeadLayout) -> Result<Tensor<T>> {
        check::head_layout("relation", x, layout)?;
        let out = kernels::relation(x.data(), layout);
        let rows = layout.batch * layout.heads * layout.seq;
        fwd::finish("relation", vec![rows, layout.seq], out)
    }

    fn kl_div_logits(&mut self, logits: &Tensor<T>, teacher: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(fwd::kl_div_logits(logits, teacher)?.0)
    }

    fn cross_entropy(&mut self, logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
        Ok(fwd::cross_entropy(logits, targets)?.0)
    }

    fn cosine_rows(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::cosine_rows(a, b)
    }

    fn sum(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::finish("sum", vec![1], vec![a.sum()])
    }

    fn mean(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        fwd::finish("mean", vec![1], vec![a.sum() / T::from_usize(a.numel()).unwrap()])
    }

    fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        a.clone().reshape(shape)
    }
}
