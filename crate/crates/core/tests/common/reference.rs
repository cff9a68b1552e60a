//! Straight-line forward pass on nested vectors, one sequence at a time.

use prunekit::model::{ModelParams, LN_EPS};
use prunekit::{ModelConfig, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn ref_ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * g[i] + b[i])
        .collect()
}

/// `W · x` where each row of `w` is one output unit.
pub fn ref_proj(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ · a` where each row of `w` is one input unit.
pub fn ref_back_proj(w: &Mat, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (row, &ai) in w.iter().zip(a) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += ai * wv;
        }
    }
    out
}

pub fn ref_rope(x: &mut [f64], pos: usize, d_head: usize) {
    for head in x.chunks_mut(d_head) {
        for i in 0..d_head / 2 {
            let theta = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_head as f64);
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * theta.cos() - b * theta.sin();
            head[2 * i + 1] = a * theta.sin() + b * theta.cos();
        }
    }
}

/// Everything the reference forward computes for one sequence; each `Mat`
/// has one row per position.
#[derive(Default)]
pub struct Trace {
    pub logits: Mat,
    /// `[layer]` concatenated head outputs before `W^O`.
    pub head_out: Vec<Mat>,
    /// `[layer]` MLP pre-activations.
    pub mlp_pre: Vec<Mat>,
    /// Every LayerNorm output in network order.
    pub norms: Vec<Mat>,
    /// Residual states entering each block, then the final state.
    pub blocks: Vec<Mat>,
}

pub fn ref_trace(cfg: &ModelConfig, p: &ModelParams<Tensor<f64>>, tokens: &[u32]) -> Trace {
    let dh = cfg.d_head;
    let emb = rows_of(&p.embedding);
    let mut tr = Trace::default();
    let mut xs: Mat = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    for l in &p.layers {
        tr.blocks.push(xs.clone());
        let (wq, wk, wv, wo) = (rows_of(&l.wq), rows_of(&l.wk), rows_of(&l.wv), rows_of(&l.wo));
        let (w1, w2) = (rows_of(&l.w1), rows_of(&l.w2));
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        let mut ln1 = Vec::new();
        for (pos, x) in xs.iter().enumerate() {
            let h = ref_ln(x, l.ln1_gamma.data(), l.ln1_beta.data());
            let mut q = ref_proj(&wq, &h);
            let mut k = ref_proj(&wk, &h);
            ref_rope(&mut q, pos, dh);
            ref_rope(&mut k, pos, dh);
            qs.push(q);
            ks.push(k);
            vs.push(ref_proj(&wv, &h));
            ln1.push(h);
        }
        tr.norms.push(ln1);
        let per_group = cfg.num_heads / cfg.num_query_groups;
        let mut heads = Vec::new();
        for s in 0..xs.len() {
            let mut attn = vec![0.0; cfg.num_heads * dh];
            for head in 0..cfg.num_heads {
                let g = head / per_group;
                let q = &qs[s][head * dh..(head + 1) * dh];
                let scores: Vec<f64> = (0..=s)
                    .map(|t| {
                        let k = &ks[t][g * dh..(g + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
                for (t, sc) in scores.iter().enumerate() {
                    let w = (sc - m).exp() / z;
                    for i in 0..dh {
                        attn[head * dh + i] += w * vs[t][g * dh + i];
                    }
                }
            }
            let delta = ref_back_proj(&wo, &attn);
            for (x, d) in xs[s].iter_mut().zip(delta) {
                *x += d;
            }
            heads.push(attn);
        }
        tr.head_out.push(heads);
        let mut ln2 = Vec::new();
        let mut pres = Vec::new();
        for x in xs.iter_mut() {
            let h = ref_ln(x, l.ln2_gamma.data(), l.ln2_beta.data());
            let pre = ref_proj(&w1, &h);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0).powi(2)).collect();
            let delta = ref_back_proj(&w2, &act);
            for (xi, d) in x.iter_mut().zip(delta) {
                *xi += d;
            }
            ln2.push(h);
            pres.push(pre);
        }
        tr.norms.push(ln2);
        tr.mlp_pre.push(pres);
    }
    tr.blocks.push(xs.clone());
    let head = rows_of(p.head.as_ref().unwrap_or(&p.embedding));
    let fin: Mat = xs
        .iter()
        .map(|x| ref_ln(x, p.final_gamma.data(), p.final_beta.data()))
        .collect();
    tr.logits = fin.iter().map(|h| ref_proj(&head, h)).collect();
    tr.norms.push(fin);
    tr
}

pub fn ref_forward(cfg: &ModelConfig, p: &ModelParams<Tensor<f64>>, tokens: &[u32]) -> Mat {
    ref_trace(cfg, p, tokens).logits
}
