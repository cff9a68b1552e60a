use super::{width_importance, AggregationSpec, CalibrationInfo, ImportanceError, ImportanceReport, WidthAxes};
use crate::model::{Model, ModelConfig, TokenBatch};
use crate::pruner::{fit_groups, prune_width};
use crate::tensor::Float;

/// Widths after each of `rounds` equal steps from `source` down to `target`:
/// `source − i·(source − target)/rounds` for `i = 1..=rounds`.
pub fn iterative_schedule(source: usize, target: usize, rounds: usize) -> Result<Vec<usize>, ImportanceError> {
    if rounds == 0 {
        return Err(ImportanceError::Schedule("at least one round is required".into()));
    }
    if target > source {
        return Err(ImportanceError::Schedule(format!("target {target} exceeds source {source}")));
    }
    let gap = source - target;
    if gap % rounds != 0 {
        return Err(ImportanceError::Schedule(format!(
            "reduction {gap} is not divisible into {rounds} rounds"
        )));
    }
    let step = gap / rounds;
    Ok((1..=rounds).map(|i| source - i * step).collect())
}

/// Alternates width scoring and pruning for `rounds` rounds until the model
/// reaches the width axes of `target`. One round is exactly single-shot pruning.
pub fn iterative_importance<T: Float>(
    model: &Model<T>,
    target: &ModelConfig,
    rounds: usize,
    calib: &TokenBatch,
    spec: AggregationSpec,
) -> Result<Model<T>, ImportanceError> {
    let src = model.config;
    if target.num_layers != src.num_layers {
        return Err(ImportanceError::Schedule("iterative pruning covers width axes only".into()));
    }
    let d_model = iterative_schedule(src.d_model, target.d_model, rounds)?;
    let d_hidden = iterative_schedule(src.d_hidden, target.d_hidden, rounds)?;
    let heads = iterative_schedule(src.num_heads, target.num_heads, rounds)?;
    let calibration = CalibrationInfo::of(calib);
    let mut current = model.clone();
    for i in 0..rounds {
        let cur = current.config;
        let mut next = cur;
        next.d_model = d_model[i];
        next.d_hidden = d_hidden[i];
        next.num_heads = heads[i];
        next.num_query_groups = if i + 1 == rounds {
            target.num_query_groups
        } else {
            fit_groups(heads[i], cur.num_query_groups)
        };
        if next == cur {
            continue;
        }
        let axes = WidthAxes {
            heads: next.num_heads != cur.num_heads || next.num_query_groups != cur.num_query_groups,
            neurons: next.d_hidden != cur.d_hidden,
            emb: next.d_model != cur.d_model,
        };
        let width = width_importance(&current, calib, spec, axes)?;
        let report = ImportanceReport::from_scores(cur, spec, calibration.clone(), width, None, None, Vec::new());
        log::debug!("iterative round {}: {:?}", i + 1, next);
        current = prune_width(&current, &next, &report, false)?;
    }
    Ok(current)
}
