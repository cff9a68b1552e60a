//! Slice-level numeric kernels shared by the eager and taped executors.
//!
//! Every reduction runs in a fixed sequential order so results are
//! bit-reproducible for identical inputs.

use crate::tensor::Float;

/// Additive mask for positions a causal row may not attend to.
pub const MASKED_LOGIT: f64 = -1.0e9;

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(aip, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cij) in crow.iter_mut().enumerate() {
            *cij += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(aip, brow, &mut c[p * n..(p + 1) * n]);
        }
    }
}

pub fn softmax_rows<T: Float>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        let inv = T::one() / sum;
        for oi in o.iter_mut() {
            *oi *= inv;
        }
    }
    out
}

pub fn log_softmax_rows<T: Float>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let lse = log_sum_exp(row);
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

pub fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

pub struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Float>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> LayerNormOut<T> {
    let d = gamma.len();
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            yr[i] = xh[i] * gamma[i] + beta[i];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Float>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    let mut dxh = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxh[i] = dyr[i] * gamma[i];
            mean_dxh += dxh[i];
            mean_dxh_xh += dxh[i] * xh[i];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = rs * (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

/// Layout of a batch of packed per-head states: rows are `(batch, position)`,
/// columns are `heads × d_head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

fn rope_table(seq: usize, d_head: usize, base: f64) -> Vec<(f64, f64)> {
    let half = d_head / 2;
    let mut t = Vec::with_capacity(seq * half);
    for pos in 0..seq {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
            t.push((theta.cos(), theta.sin()));
        }
    }
    t
}

/// Rotary position encoding on adjacent channel pairs of each head.
/// `inverse` applies the transposed rotation (used for the backward pass).
pub fn rope<T: Float>(x: &[T], layout: HeadLayout, base: f64, inverse: bool) -> Vec<T> {
    let half = layout.d_head / 2;
    let table = rope_table(layout.seq, layout.d_head, base);
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.to_vec();
    let w = layout.width();
    for b in 0..layout.batch {
        for s in 0..layout.seq {
            let row = &mut out[(b * layout.seq + s) * w..(b * layout.seq + s + 1) * w];
            for h in 0..layout.heads {
                let hd = &mut row[h * layout.d_head..(h + 1) * layout.d_head];
                for i in 0..half {
                    let (c, sn) = table[s * half + i];
                    let c = T::from_f64c(c);
                    let sn = T::from_f64c(sign * sn);
                    let (x0, x1) = (hd[2 * i], hd[2 * i + 1]);
                    hd[2 * i] = x0 * c - x1 * sn;
                    hd[2 * i + 1] = x0 * sn + x1 * c;
                }
            }
        }
    }
    out
}

/// Shape of a grouped-query causal attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub groups: usize,
    pub d_head: usize,
}

impl AttnShape {
    pub fn q_width(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.groups * self.d_head
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / (self.heads / self.groups)
    }
}

/// Causal scaled dot-product attention. Returns the concatenated per-head
/// outputs `[B·S × H·d_head]` and the attention probabilities `[B, H, S, S]`.
pub fn attention<T: Float>(q: &[T], k: &[T], v: &[T], sh: AttnShape) -> (Vec<T>, Vec<T>) {
    let (s_len, dh) = (sh.seq, sh.d_head);
    let (qw, kw) = (sh.q_width(), sh.kv_width());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); sh.batch * s_len * qw];
    let mut probs = vec![T::zero(); sh.batch * sh.heads * s_len * s_len];
    let mut scores = vec![T::zero(); s_len];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let g = sh.group_of(h);
            for s in 0..s_len {
                let qs = &q[(b * s_len + s) * qw + h * dh..][..dh];
                for t in 0..=s {
                    let kt = &k[(b * s_len + t) * kw + g * dh..][..dh];
                    scores[t] = dot(qs, kt) * scale;
                }
                let max = scores[..=s].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for sc in scores[..=s].iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let p_row = &mut probs[((b * sh.heads + h) * s_len + s) * s_len..][..s_len];
                let o = &mut out[(b * s_len + s) * qw + h * dh..][..dh];
                for t in 0..=s {
                    let p = scores[t] / sum;
                    p_row[t] = p;
                    axpy(p, &v[(b * s_len + t) * kw + g * dh..][..dh], o);
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward<T: Float>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    sh: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (s_len, dh) = (sh.seq, sh.d_head);
    let (qw, kw) = (sh.q_width(), sh.kv_width());
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); s_len];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let g = sh.group_of(h);
            for s in 0..s_len {
                let p_row = &probs[((b * sh.heads + h) * s_len + s) * s_len..][..s_len];
                let dos = &dout[(b * s_len + s) * qw + h * dh..][..dh];
                let mut pdp = T::zero();
                for t in 0..=s {
                    let vt = (b * s_len + t) * kw + g * dh;
                    dp[t] = dot(dos, &v[vt..vt + dh]);
                    pdp += p_row[t] * dp[t];
                    axpy(p_row[t], dos, &mut dv[vt..vt + dh]);
                }
                let qs_off = (b * s_len + s) * qw + h * dh;
                for t in 0..=s {
                    let ds = p_row[t] * (dp[t] - pdp) * scale;
                    let kt = (b * s_len + t) * kw + g * dh;
                    axpy(ds, &k[kt..kt + dh], &mut dq[qs_off..qs_off + dh]);
                    axpy(ds, &q[qs_off..qs_off + dh], &mut dk[kt..kt + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Per-head causal self-relation logits of a packed state:
/// `out[(b·R + r)·S + s, t] = ⟨x_s^r, x_t^r⟩ / √w` for `t ≤ s`, masked otherwise.
pub fn relation<T: Float>(x: &[T], layout: HeadLayout) -> Vec<T> {
    let (s_len, w, dw) = (layout.seq, layout.width(), layout.d_head);
    let scale = T::one() / T::from_usize(dw).unwrap().sqrt();
    let mask = T::from_f64c(MASKED_LOGIT);
    let mut out = vec![mask; layout.batch * layout.heads * s_len * s_len];
    for b in 0..layout.batch {
        for r in 0..layout.heads {
            for s in 0..s_len {
                let xs = &x[(b * s_len + s) * w + r * dw..][..dw];
                let row = &mut out[((b * layout.heads + r) * s_len + s) * s_len..][..s_len];
                for t in 0..=s {
                    row[t] = dot(xs, &x[(b * s_len + t) * w + r * dw..][..dw]) * scale;
                }
            }
        }
    }
    out
}

pub fn relation_backward<T: Float>(dout: &[T], x: &[T], layout: HeadLayout) -> Vec<T> {
    let (s_len, w, dw) = (layout.seq, layout.width(), layout.d_head);
    let scale = T::one() / T::from_usize(dw).unwrap().sqrt();
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..layout.batch {
        for r in 0..layout.heads {
            for s in 0..s_len {
                let row = &dout[((b * layout.heads + r) * s_len + s) * s_len..][..s_len];
                let so = (b * s_len + s) * w + r * dw;
                for t in 0..=s {
                    let g = row[t] * scale;
                    let to = (b * s_len + t) * w + r * dw;
                    // s == t contributes twice: once through each operand.
                    for i in 0..dw {
                        let (xs, xt) = (x[so + i], x[to + i]);
                        dx[so + i] += g * xt;
                        dx[to + i] += g * xs;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..13).map(|i| i as f64).collect();
        let b = vec![1.0; 13];
        assert_eq!(dot(&a, &b), 78.0);
    }

    #[test]
    fn transposed_products_agree() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0f64; 4];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ·c where a: 2×3, c: 2×2 -> 3×2
        let mut c3 = [0.0f64; 6];
        matmul_tn_acc(&a, &c, &mut c3, 2, 3, 2);
        assert_eq!(c3[0], 1.0 * 58.0 + 4.0 * 139.0);
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let layout = HeadLayout { batch: 1, seq: 3, heads: 2, d_head: 4 };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = rope(&x, layout, 10_000.0, false);
        let back = rope(&y, layout, 10_000.0, true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        // position 0 is unrotated
        assert_eq!(&y[..8], &x[..8]);
    }

    #[test]
    fn attention_first_position_copies_value() {
        let sh = AttnShape { batch: 1, seq: 2, heads: 2, groups: 1, d_head: 2 };
        let q = vec![0.3, -0.1, 0.2, 0.5, 1.0, 0.0, 0.0, 1.0];
        let k = vec![0.1, 0.2, 0.4, -0.3];
        let v = vec![5.0, 6.0, 7.0, 8.0];
        let (out, probs) = attention(&q, &k, &v, sh);
        assert_eq!(&out[..4], &[5.0, 6.0, 5.0, 6.0]);
        let row_sum: f64 = probs[2..4].iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }
}
