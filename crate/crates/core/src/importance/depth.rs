use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibration_chunks, ImportanceError};
use crate::model::{CaptureSpec, Model, TokenBatch};
use crate::pruner::prune_depth;
use crate::tensor::{Float, Tensor};

/// Block importance of the contiguous layers `start .. start + length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub start: usize,
    pub length: usize,
    pub score: f64,
}

/// Cosine similarity of two rows. Two zero rows count as identical, a zero
/// row against a nonzero one as orthogonal.
fn row_cosine<T: Float>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64c(), y.to_f64c());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => ab / (aa.sqrt() * bb.sqrt()),
    }
}

fn cosine_sum<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    (0..a.rows()).map(|r| row_cosine(a.row(r), b.row(r))).sum()
}

/// `1 − E[cos(x_in, x_out)]` over rows of two `[rows × d]` state matrices.
pub fn bi_from_states<T: Float>(input: &Tensor<T>, output: &Tensor<T>) -> Result<f64, ImportanceError> {
    if input.shape() != output.shape() || input.rank() != 2 {
        return Err(ImportanceError::StateShape {
            input: input.shape().to_vec(),
            output: output.shape().to_vec(),
        });
    }
    Ok(1.0 - cosine_sum(input, output) / input.rows() as f64)
}

/// BI for arbitrary `(from, to)` residual-state pairs in one sweep.
fn pair_bi<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, ImportanceError> {
    let chunks = calibration_chunks(calib)?;
    let capture = CaptureSpec {
        blocks: true,
        ..CaptureSpec::none()
    };
    let sums: Vec<(Vec<f64>, usize)> = chunks
        .par_iter()
        .map(|chunk| {
            let (_, rec) = model.forward(chunk, &capture)?;
            let x = &rec.block_inputs;
            let s = pairs.iter().map(|&(i, j)| cosine_sum(&x[i], &x[j])).collect();
            Ok((s, chunk.batch * chunk.seq))
        })
        .collect::<Result<_, ImportanceError>>()?;
    let rows: usize = sums.iter().map(|(_, n)| n).sum();
    let mut total = vec![0.0; pairs.len()];
    for (s, _) in &sums {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    Ok(total.into_iter().map(|t| 1.0 - t / rows as f64).collect())
}

/// Per-layer block importance from a single forward pass per calibration chunk.
pub fn layer_importance_bi<T: Float>(model: &Model<T>, calib: &TokenBatch) -> Result<Vec<f64>, ImportanceError> {
    let pairs: Vec<_> = (0..model.config.num_layers).map(|i| (i, i + 1)).collect();
    pair_bi(model, calib, &pairs)
}

pub fn block_bi<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    start: usize,
    length: usize,
) -> Result<f64, ImportanceError> {
    Ok(block_bi_all(model, calib, &[(start, length)])?[0].score)
}

/// Scores each listed `(start, length)` block.
pub fn block_bi_all<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    blocks: &[(usize, usize)],
) -> Result<Vec<BlockScore>, ImportanceError> {
    let layers = model.config.num_layers;
    for &(start, length) in blocks {
        if length == 0 || start + length > layers {
            return Err(ImportanceError::BlockOutOfRange { start, length, layers });
        }
    }
    let pairs: Vec<_> = blocks.iter().map(|&(s, l)| (s, s + l)).collect();
    let scores = pair_bi(model, calib, &pairs)?;
    Ok(blocks
        .iter()
        .zip(scores)
        .map(|(&(start, length), score)| BlockScore { start, length, score })
        .collect())
}

/// Every contiguous block of the given length.
pub fn blocks_of_length(layers: usize, length: usize) -> Vec<(usize, usize)> {
    if length == 0 || length > layers {
        return Vec::new();
    }
    (0..=layers - length).map(|s| (s, length)).collect()
}

/// Perplexity on the calibration set with each layer removed in turn.
/// Higher means the layer matters more.
pub fn layer_importance_ppl<T: Float>(model: &Model<T>, calib: &TokenBatch) -> Result<Vec<f64>, ImportanceError> {
    if model.config.num_layers < 2 {
        return Err(ImportanceError::SingleLayer);
    }
    let chunks = calibration_chunks(calib)?;
    (0..model.config.num_layers)
        .into_par_iter()
        .map(|i| {
            let reduced = prune_depth(model, &[i])?;
            Ok(reduced.perplexity(&chunks)?)
        })
        .collect()
}
