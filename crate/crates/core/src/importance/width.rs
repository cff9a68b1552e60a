use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{batch_aggregate, seq_aggregate};
use super::{calibration_chunks, AggregationSpec, ImportanceError};
use crate::model::{ActivationRecord, CaptureSpec, Model, ModelConfig, TokenBatch};
use crate::tensor::{Float, Tensor};

/// Width importance for every prunable unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthScores {
    /// `[layer][head]`
    pub heads: Vec<Vec<f64>>,
    /// `[layer][mlp channel]`
    pub neurons: Vec<Vec<f64>>,
    /// `[embedding channel]`, summed over every LayerNorm site.
    pub emb: Vec<f64>,
}

/// Which width axes to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthAxes {
    pub heads: bool,
    pub neurons: bool,
    pub emb: bool,
}

impl WidthAxes {
    pub fn all() -> Self {
        Self {
            heads: true,
            neurons: true,
            emb: true,
        }
    }

    fn capture(self) -> CaptureSpec {
        CaptureSpec {
            heads: self.heads,
            neurons: self.neurons,
            norms: self.emb,
            ..CaptureSpec::none()
        }
    }
}

/// Per-sample sequence aggregates, `[site][sample][unit]`.
#[derive(Default)]
struct SampleTables {
    heads: Vec<Vec<Vec<f64>>>,
    neurons: Vec<Vec<Vec<f64>>>,
    emb: Vec<Vec<Vec<f64>>>,
}

impl SampleTables {
    fn append(&mut self, other: SampleTables) {
        fn cat(dst: &mut Vec<Vec<Vec<f64>>>, src: Vec<Vec<Vec<f64>>>) {
            if dst.is_empty() {
                *dst = src;
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    d.extend(s);
                }
            }
        }
        cat(&mut self.heads, other.heads);
        cat(&mut self.neurons, other.neurons);
        cat(&mut self.emb, other.emb);
    }
}

fn to_f64<T: Float>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64c()).collect()
}

/// Per-token L2 norm of each head's `d_head` slice: `[rows × heads]`.
fn head_norms<T: Float>(head_out: &Tensor<T>, heads: usize, d_head: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(head_out.rows() * heads);
    for r in 0..head_out.rows() {
        let row = head_out.row(r);
        for h in 0..heads {
            let sq: f64 = row[h * d_head..(h + 1) * d_head]
                .iter()
                .map(|v| {
                    let v = v.to_f64c();
                    v * v
                })
                .sum();
            out.push(sq.sqrt());
        }
    }
    out
}

fn sample_tables<T: Float>(
    record: &ActivationRecord<Tensor<T>>,
    config: &ModelConfig,
    spec: AggregationSpec,
    axes: WidthAxes,
) -> Result<SampleTables, ImportanceError> {
    let (b, s) = (record.batch, record.seq);
    let f = spec.seq_fn;
    let mut out = SampleTables::default();
    for layer in &record.layers {
        if axes.heads {
            let h = layer.head_out.as_ref().ok_or(ImportanceError::CaptureMissing("head outputs"))?;
            let norms = head_norms(h, config.num_heads, config.d_head);
            out.heads.push(seq_aggregate(&norms, b, s, config.num_heads, f));
        }
        if axes.neurons {
            let pre = layer.mlp_pre.as_ref().ok_or(ImportanceError::CaptureMissing("mlp activations"))?;
            out.neurons.push(seq_aggregate(&to_f64(pre), b, s, pre.cols(), f));
        }
    }
    if axes.emb {
        let sites = record.norm_sites();
        if sites.len() != 2 * record.layers.len() + 1 {
            return Err(ImportanceError::CaptureMissing("layernorm outputs"));
        }
        for site in sites {
            out.emb.push(seq_aggregate(&to_f64(site), b, s, site.cols(), f));
        }
    }
    Ok(out)
}

fn finish(tables: SampleTables, spec: AggregationSpec) -> WidthScores {
    let f = spec.batch_fn;
    let heads = tables.heads.iter().map(|t| batch_aggregate(t, f)).collect();
    let neurons = tables.neurons.iter().map(|t| batch_aggregate(t, f)).collect();
    let mut emb: Vec<f64> = Vec::new();
    for site in &tables.emb {
        let scores = batch_aggregate(site, f);
        if emb.is_empty() {
            emb = scores;
        } else {
            for (e, s) in emb.iter_mut().zip(scores) {
                *e += s;
            }
        }
    }
    WidthScores { heads, neurons, emb }
}

/// Scores already-captured records. The records jointly form the
/// calibration set; their samples are pooled before batch aggregation.
pub fn width_scores_from_records<T: Float>(
    records: &[ActivationRecord<Tensor<T>>],
    config: &ModelConfig,
    spec: AggregationSpec,
    axes: WidthAxes,
) -> Result<WidthScores, ImportanceError> {
    if records.is_empty() {
        return Err(ImportanceError::Empty("calibration set"));
    }
    let mut tables = SampleTables::default();
    for r in records {
        tables.append(sample_tables(r, config, spec, axes)?);
    }
    Ok(finish(tables, spec))
}

/// Forward-only width importance over a calibration batch.
pub fn width_importance<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    spec: AggregationSpec,
    axes: WidthAxes,
) -> Result<WidthScores, ImportanceError> {
    let chunks = calibration_chunks(calib)?;
    let capture = axes.capture();
    let tables: Vec<SampleTables> = chunks
        .par_iter()
        .map(|chunk| {
            let (_, record) = model.forward(chunk, &capture)?;
            sample_tables(&record, &model.config, spec, axes)
        })
        .collect::<Result<_, _>>()?;
    let mut all = SampleTables::default();
    for t in tables {
        all.append(t);
    }
    Ok(finish(all, spec))
}

pub fn head_importance<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    spec: AggregationSpec,
) -> Result<Vec<Vec<f64>>, ImportanceError> {
    let axes = WidthAxes {
        heads: true,
        neurons: false,
        emb: false,
    };
    Ok(width_importance(model, calib, spec, axes)?.heads)
}

pub fn neuron_importance<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    spec: AggregationSpec,
) -> Result<Vec<Vec<f64>>, ImportanceError> {
    let axes = WidthAxes {
        heads: false,
        neurons: true,
        emb: false,
    };
    Ok(width_importance(model, calib, spec, axes)?.neurons)
}

pub fn emb_importance<T: Float>(
    model: &Model<T>,
    calib: &TokenBatch,
    spec: AggregationSpec,
) -> Result<Vec<f64>, ImportanceError> {
    let axes = WidthAxes {
        heads: false,
        neurons: false,
        emb: true,
    };
    Ok(width_importance(model, calib, spec, axes)?.emb)
}
