use std::sync::atomic::{AtomicU64, Ordering};

use super::eager::fwd;
use super::{check, Graph};
use crate::kernels::{self, AttnShape, HeadLayout};
use crate::tensor::{Float, Result, Tensor, TensorError};

static TAPES_CREATED: AtomicU64 = AtomicU64::new(0);

/// Number of tapes constructed in this process so far.
pub fn tapes_created() -> u64 {
    TAPES_CREATED.load(Ordering::SeqCst)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

enum Op<T> {
    Leaf,
    Const,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    ReluSq(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        g: usize,
        b: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherCols {
        x: usize,
        idx: Vec<usize>,
        k: usize,
    },
    Rope {
        x: usize,
        layout: HeadLayout,
        base: f64,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        shape: AttnShape,
        probs: Vec<T>,
    },
    Relation {
        x: usize,
        layout: HeadLayout,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        logits: usize,
        ps: Vec<T>,
        pt: Vec<T>,
    },
    CosineRows(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single training context: an append-only record of primitive ops in
/// topological order.
pub struct Tape<T: Float = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        let id = TAPES_CREATED.fetch_add(1, Ordering::SeqCst) + 1;
        Self { id, nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: &Var) -> Result<usize> {
        if v.tape == self.id && v.id < self.nodes.len() {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignValue)
        }
    }

    fn t(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Replays the tape in reverse from a scalar `loss`, visiting each op once.
    pub fn backward(self, loss: &Var) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[root].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut acc = |j: usize, contrib: Vec<T>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[*a].needs_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_nt_acc(&g, tb.data(), &mut da, m, n, k);
                        acc(*a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul_tn_acc(ta.data(), &g, &mut db, m, k, n);
                        acc(*b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    if nodes[*a].needs_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_acc(&g, tb.data(), &mut da, m, n, k);
                        acc(*a, da);
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![T::zero(); n * k];
                        kernels::matmul_tn_acc(&g, ta.data(), &mut db, m, n, k);
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|&x| -x).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, g.iter().zip(tb).map(|(&gi, &y)| gi * y).collect());
                    acc(*b, g.iter().zip(ta).map(|(&gi, &x)| gi * x).collect());
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::Square(a) => {
                    let x = nodes[*a].value.data();
                    let two = T::from_f64c(2.0);
                    acc(*a, g.iter().zip(x).map(|(&gi, &xi)| two * xi * gi).collect());
                }
                Op::ReluSq(a) => {
                    let x = nodes[*a].value.data();
                    let two = T::from_f64c(2.0);
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi > T::zero() { two * xi * gi } else { T::zero() })
                            .collect(),
                    );
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    acc(*a, dx);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let s: T = gr.iter().copied().sum();
                        for j in 0..c {
                            dr[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(*a, dx);
                }
                Op::LayerNorm { x, g: gm, b, xhat, rstd } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(&g, xhat, rstd, nodes[*gm].value.data());
                    acc(*x, dx);
                    acc(*gm, dg);
                    acc(*b, db);
                }
                Op::Embedding { table, ids } => {
                    let tv = &nodes[*table].value;
                    let d = tv.cols();
                    let mut dt = vec![T::zero(); tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    acc(*table, dt);
                }
                Op::GatherCols { x, idx, k } => {
                    let xv = &nodes[*x].value;
                    let cols = xv.cols();
                    let mut dx = vec![T::zero(); xv.numel()];
                    for r in 0..xv.rows() {
                        for j in 0..*k {
                            dx[r * cols + idx[r * k + j]] += g[r * k + j];
                        }
                    }
                    acc(*x, dx);
                }
                Op::Rope { x, layout, base } => acc(*x, kernels::rope(&g, *layout, *base, true)),
                Op::Attention { q, k, v, shape, probs } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        nodes[*q].value.data(),
                        nodes[*k].value.data(),
                        nodes[*v].value.data(),
                        probs,
                        *shape,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Relation { x, layout } => {
                    acc(*x, kernels::relation_backward(&g, nodes[*x].value.data(), *layout));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = nodes[*logits].value.cols();
                    let scale = g[0] / T::from_usize(targets.len()).unwrap();
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * v + t] -= scale;
                    }
                    acc(*logits, dx);
                }
                Op::KlDiv { logits, ps, pt } => {
                    let rows = nodes[*logits].value.rows();
                    let scale = g[0] / T::from_usize(rows).unwrap();
                    acc(*logits, ps.iter().zip(pt).map(|(&a, &b)| (a - b) * scale).collect());
                }
                Op::CosineRows(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let c = ta.cols();
                    let tiny = T::min_positive_value().sqrt();
                    let mut da = vec![T::zero(); ta.numel()];
                    let mut db = vec![T::zero(); tb.numel()];
                    for r in 0..ta.rows() {
                        let (x, y) = (ta.row(r), tb.row(r));
                        let nx = kernels::dot(x, x).sqrt().max(tiny);
                        let ny = kernels::dot(y, y).sqrt().max(tiny);
                        let cos = node.value.data()[r];
                        let inv = T::one() / (nx * ny);
                        for j in 0..c {
                            da[r * c + j] = g[r] * (y[j] * inv - cos * x[j] / (nx * nx));
                            db[r * c + j] = g[r] * (x[j] * inv - cos * y[j] / (ny * ny));
                        }
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.numel();
                    acc(*a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel();
                    acc(*a, vec![g[0] / T::from_usize(n).unwrap(); n]);
                }
            }
        }
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: tensors,
        })
    }
}

/// Gradients of trainable leaves, produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, v: &Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: &Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl<T: Float> Graph<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const, &[])
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, &[])
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        assert_eq!(v.tape, self.id, "value from another tape");
        &self.nodes[v.id].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::matmul(self.t(a), self.t(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::matmul_t(self.t(a), self.t(b))?;
        Ok(self.push(out, Op::MatMulT(a, b), &[a, b]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::zip("add", self.t(a), self.t(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::zip("sub", self.t(a), self.t(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::zip("mul", self.t(a), self.t(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn scale(&mut self, a: &Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        let out = fwd::unary("scale", self.t(a), |x| x * c)?;
        Ok(self.push(out, Op::Scale(a, c), &[a]))
    }

    fn add_scalar(&mut self, a: &Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        let out = fwd::unary("add_scalar", self.t(a), |x| x + c)?;
        Ok(self.push(out, Op::AddScalar(a), &[a]))
    }

    fn square(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = fwd::unary("square", self.t(a), |x| x * x)?;
        Ok(self.push(out, Op::Square(a), &[a]))
    }

    fn relu_sq(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = fwd::unary("relu_sq", self.t(a), fwd::relu_sq)?;
        Ok(self.push(out, Op::ReluSq(a), &[a]))
    }

    fn softmax(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let x = self.t(a);
        let out = fwd::finish("softmax", x.shape().to_vec(), kernels::softmax_rows(x.data(), x.cols()))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    fn log_softmax(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let x = self.t(a);
        let out = fwd::finish(
            "log_softmax",
            x.shape().to_vec(),
            kernels::log_softmax_rows(x.data(), x.cols()),
        )?;
        Ok(self.push(out, Op::LogSoftmax(a), &[a]))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: T) -> Result<Var> {
        let (x, g, b) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, aux) = fwd::layer_norm(self.t(x), self.t(g), self.t(b), eps)?;
        let op = Op::LayerNorm {
            x,
            g,
            b,
            xhat: aux.xhat,
            rstd: aux.rstd,
        };
        Ok(self.push(out, op, &[x, g, b]))
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let table = self.idx(table)?;
        let out = fwd::embedding(self.t(table), ids)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    fn gather_cols(&mut self, x: &Var, idx: &[usize], k: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let out = fwd::gather_cols(self.t(x), idx, k)?;
        let op = Op::GatherCols {
            x,
            idx: idx.to_vec(),
            k,
        };
        Ok(self.push(out, op, &[x]))
    }

    fn rope(&mut self, x: &Var, layout: HeadLayout, base: f64) -> Result<Var> {
        let x = self.idx(x)?;
        let xt = self.t(x);
        check::head_layout("rope", xt, layout)?;
        let out = fwd::finish("rope", xt.shape().to_vec(), kernels::rope(xt.data(), layout, base, false))?;
        Ok(self.push(out, Op::Rope { x, layout, base }, &[x]))
    }

    fn attention(&mut self, q: &Var, k: &Var, v: &Var, shape: AttnShape) -> Result<Var> {
        let (q, k, v) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        check::attention(self.t(q), self.t(k), self.t(v), shape)?;
        let (out, probs) = kernels::attention(self.t(q).data(), self.t(k).data(), self.t(v).data(), shape);
        let out = fwd::finish("attention", self.t(q).shape().to_vec(), out)?;
        Ok(self.push(out, Op::Attention { q, k, v, shape, probs }, &[q, k, v]))
    }

    fn relation(&mut self, x: &Var, layout: HeadLayout) -> Result<Var> {
        let x = self.idx(x)?;
        check::head_layout("relation", self.t(x), layout)?;
        let out = kernels::relation(self.t(x).data(), layout);
        let rows = layout.batch * layout.heads * layout.seq;
        let out = fwd::finish("relation", vec![rows, layout.seq], out)?;
        Ok(self.push(out, Op::Relation { x, layout }, &[x]))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let logits = self.idx(logits)?;
        let (out, probs) = fwd::cross_entropy(self.t(logits), targets)?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(out, op, &[logits]))
    }

    fn kl_div_logits(&mut self, logits: &Var, teacher: &Tensor<T>) -> Result<Var> {
        let logits = self.idx(logits)?;
        let (out, ps, pt) = fwd::kl_div_logits(self.t(logits), teacher)?;
        Ok(self.push(out, Op::KlDiv { logits, ps, pt }, &[logits]))
    }

    fn cosine_rows(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = fwd::cosine_rows(self.t(a), self.t(b))?;
        Ok(self.push(out, Op::CosineRows(a, b), &[a, b]))
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = fwd::finish("sum", vec![1], vec![self.t(a).sum()])?;
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        let a = self.idx(a)?;
        let t = self.t(a);
        let out = fwd::finish("mean", vec![1], vec![t.sum() / T::from_usize(t.numel()).unwrap()])?;
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.t(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }
}
