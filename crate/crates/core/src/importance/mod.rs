//! Forward-only importance estimation.
//!
//! Width scores come from captured activations: per-head attention output
//! norms, MLP pre-activations, and post-LayerNorm embedding channels. Depth
//! scores are perplexity-after-removal and block influence (one minus the
//! cosine similarity between a block's input and output states). Nothing in
//! this module records a gradient tape.

mod aggregate;
mod depth;
mod iterative;
mod width;

pub use aggregate::{aggregate, AggFn, AggregationSpec};
pub use depth::{
    bi_from_states, block_bi, block_bi_all, blocks_of_length, layer_importance_bi, layer_importance_ppl, BlockScore,
};
pub use iterative::{iterative_importance, iterative_schedule};
pub use width::{
    emb_importance, head_importance, neuron_importance, width_importance, width_scores_from_records, WidthAxes,
    WidthScores,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, TokenBatch};
use crate::pruner::PruneError;
use crate::tensor::Float;

/// Sequences per forward pass when sweeping a calibration batch.
const CHUNK_ROWS: usize = 8;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("activation capture missing: {0}")]
    CaptureMissing(&'static str),
    #[error("unknown aggregation function {0:?} (expected mean_abs, l2 or variance)")]
    UnknownAggregation(String),
    #[error("perplexity importance needs at least two layers")]
    SingleLayer,
    #[error("block starting at {start} with length {length} does not fit in {layers} layers")]
    BlockOutOfRange { start: usize, length: usize, layers: usize },
    #[error("state shapes differ: {input:?} vs {output:?}")]
    StateShape { input: Vec<usize>, output: Vec<usize> },
    #[error("invalid pruning schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prune(#[from] Box<PruneError>),
}

impl From<PruneError> for ImportanceError {
    fn from(e: PruneError) -> Self {
        ImportanceError::Prune(Box::new(e))
    }
}

/// Splits a calibration batch into row chunks, in order.
pub(crate) fn calibration_chunks(calib: &TokenBatch) -> Result<Vec<TokenBatch>, ImportanceError> {
    if calib.batch == 0 || calib.seq == 0 {
        return Err(ImportanceError::Empty("calibration set"));
    }
    Ok((0..calib.batch)
        .step_by(CHUNK_ROWS)
        .map(|start| {
            let end = (start + CHUNK_ROWS).min(calib.batch);
            let ids = calib.ids[start * calib.seq..end * calib.seq].to_vec();
            TokenBatch::new(end - start, calib.seq, ids)
        })
        .collect())
}

/// Indices ordered from most to least important. Ties keep the lower index first.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Orderings derived from the scores of an [`ImportanceReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub heads: Vec<Vec<usize>>,
    pub neurons: Vec<Vec<usize>>,
    pub emb: Vec<usize>,
    pub layers_ppl: Option<Vec<usize>>,
    pub layers_bi: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub sequences: usize,
    pub seq_len: usize,
    /// Hex SHA-256 of the little-endian token ids.
    pub sha256: String,
}

impl CalibrationInfo {
    pub fn of(calib: &TokenBatch) -> Self {
        let mut h = Sha256::new();
        for id in &calib.ids {
            h.update(id.to_le_bytes());
        }
        let sha256 = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            sequences: calib.batch,
            seq_len: calib.seq,
            sha256,
        }
    }
}

/// Which scores to compute for a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub aggregation: AggregationSpec,
    pub depth_ppl: bool,
    pub depth_bi: bool,
    /// Every contiguous block of each listed length is scored by BI.
    pub block_lengths: Vec<usize>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            aggregation: AggregationSpec::default(),
            depth_ppl: true,
            depth_bi: true,
            block_lengths: Vec::new(),
        }
    }
}

/// Every importance score for one model and calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Configuration of the scored model.
    pub config: ModelConfig,
    pub agg_used: AggregationSpec,
    pub calibration: CalibrationInfo,
    pub head_scores: Vec<Vec<f64>>,
    pub neuron_scores: Vec<Vec<f64>>,
    pub emb_scores: Vec<f64>,
    pub layer_scores_ppl: Option<Vec<f64>>,
    pub layer_scores_bi: Option<Vec<f64>>,
    pub block_bi: Vec<BlockScore>,
    pub rankings: Rankings,
}

impl ImportanceReport {
    pub fn compute<T: Float>(
        model: &Model<T>,
        calib: &TokenBatch,
        options: &ReportOptions,
    ) -> Result<Self, ImportanceError> {
        let width = width_importance(model, calib, options.aggregation, WidthAxes::all())?;
        let layer_scores_ppl = if options.depth_ppl && model.config.num_layers >= 2 {
            Some(layer_importance_ppl(model, calib)?)
        } else {
            None
        };
        let layer_scores_bi = options
            .depth_bi
            .then(|| layer_importance_bi(model, calib))
            .transpose()?;
        let blocks: Vec<(usize, usize)> = options
            .block_lengths
            .iter()
            .flat_map(|&len| blocks_of_length(model.config.num_layers, len))
            .collect();
        let block_bi = if blocks.is_empty() {
            Vec::new()
        } else {
            block_bi_all(model, calib, &blocks)?
        };
        Ok(Self::from_scores(
            model.config,
            options.aggregation,
            CalibrationInfo::of(calib),
            width,
            layer_scores_ppl,
            layer_scores_bi,
            block_bi,
        ))
    }

    /// Assembles a report and derives its rankings.
    pub fn from_scores(
        config: ModelConfig,
        agg_used: AggregationSpec,
        calibration: CalibrationInfo,
        width: WidthScores,
        layer_scores_ppl: Option<Vec<f64>>,
        layer_scores_bi: Option<Vec<f64>>,
        block_bi: Vec<BlockScore>,
    ) -> Self {
        let rankings = Rankings {
            heads: width.heads.iter().map(|s| rank_desc(s)).collect(),
            neurons: width.neurons.iter().map(|s| rank_desc(s)).collect(),
            emb: rank_desc(&width.emb),
            layers_ppl: layer_scores_ppl.as_deref().map(rank_desc),
            layers_bi: layer_scores_bi.as_deref().map(rank_desc),
        };
        Self {
            config,
            agg_used,
            calibration,
            head_scores: width.heads,
            neuron_scores: width.neurons,
            emb_scores: width.emb,
            layer_scores_ppl,
            layer_scores_bi,
            block_bi,
            rankings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// The lowest-BI block of the given length.
    pub fn least_important_block(&self, length: usize) -> Option<BlockScore> {
        self.block_bi
            .iter()
            .filter(|b| b.length == length)
            .copied()
            .min_by(|a, b| a.score.total_cmp(&b.score).then(a.start.cmp(&b.start)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_desc(&[1.0, 3.0, 1.0, 3.0, 2.0]), vec![1, 3, 4, 0, 2]);
    }

    #[test]
    fn chunks_cover_batch_in_order() {
        let calib = TokenBatch::new(19, 2, (0..38).collect());
        let chunks = calibration_chunks(&calib).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].batch, 3);
        let joined: Vec<u32> = chunks.iter().flat_map(|c| c.ids.clone()).collect();
        assert_eq!(joined, calib.ids);
    }

    #[test]
    fn checksum_depends_on_tokens() {
        let a = CalibrationInfo::of(&TokenBatch::new(1, 3, vec![1, 2, 3]));
        let b = CalibrationInfo::of(&TokenBatch::new(1, 3, vec![1, 2, 4]));
        assert_ne!(a.sha256, b.sha256);
        assert_eq!(a.sha256.len(), 64);
    }
}
