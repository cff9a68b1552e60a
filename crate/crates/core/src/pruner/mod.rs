//! Structural trimming: heads, MLP channels, embedding channels and whole layers.
//!
//! Weights are reshaped, never masked. Kept units stay in their original
//! relative order, so pruning to the source configuration is the identity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::ImportanceReport;
use crate::model::{LayerParams, Model, ModelConfig, ModelError};
use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("target {axis} = {target} exceeds source {current}")]
    TargetExceedsSource {
        axis: &'static str,
        current: usize,
        target: usize,
    },
    #[error("target changes fixed field {0}")]
    FixedField(&'static str),
    #[error("rankings incomplete: {0}")]
    IncompleteRankings(String),
    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },
    #[error("layer {0} listed twice")]
    DuplicateLayer(usize),
    #[error("cannot remove every layer")]
    RemovesAllLayers,
    #[error("residual merge needs keep < heads <= 2·keep, got keep {keep} of {heads}")]
    MergeRange { keep: usize, heads: usize },
    #[error("{target} heads in {groups} groups cannot be drawn from groups of {available}")]
    GroupShape {
        target: usize,
        groups: usize,
        available: usize,
    },
    #[error("axis {0} is not enabled for this pruning run")]
    AxisDisabled(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, PruneError>;

/// A pruning request: reach `target`, optionally removing listed layers first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub target: ModelConfig,
    #[serde(default)]
    pub layers_to_remove: Option<Vec<usize>>,
    #[serde(default)]
    pub merge_residual_heads: bool,
}

/// How a residual head merge treats the projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Query slices only (grouped-query attention).
    QueryOnly,
    /// Query, key and value slices and the matching output-projection rows.
    Full,
}

/// Largest group count not above `preferred` that divides `heads`.
pub fn fit_groups(heads: usize, preferred: usize) -> usize {
    (1..=preferred.min(heads).max(1)).rev().find(|g| heads % g == 0).unwrap_or(1)
}

fn check_perm(order: &[usize], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(PruneError::IncompleteRankings(format!(
            "{what}: {} entries for {n} units",
            order.len()
        )));
    }
    for &i in order {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(PruneError::IncompleteRankings(format!("{what}: not a permutation")));
        }
    }
    Ok(())
}

/// The first `k` entries of a ranking, in ascending index order.
fn top_sorted(order: &[usize], k: usize) -> Vec<usize> {
    let mut kept = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

fn expand(units: &[usize], width: usize) -> Vec<usize> {
    units.iter().flat_map(|&u| u * width..(u + 1) * width).collect()
}

fn slice_rows<T: Float>(t: &Tensor<T>, unit: usize, width: usize) -> &[T] {
    &t.data()[unit * width * t.cols()..(unit + 1) * width * t.cols()]
}

/// `W_kept ← W_kept + (W_kept − W_partner)` on one `width`-row slice.
fn merge_slice<T: Float>(t: &mut Tensor<T>, kept: usize, partner: usize, width: usize) {
    let partner_rows = slice_rows(t, partner, width).to_vec();
    let c = t.cols();
    let dst = &mut t.data_mut()[kept * width * c..(kept + 1) * width * c];
    for (w, p) in dst.iter_mut().zip(partner_rows) {
        *w = *w + (*w - p);
    }
}

/// Folds pruned heads into kept ones before trimming.
///
/// `order` lists the candidate heads from most to least important; the first
/// `keep` survive. For 1-based positions `i ∈ [2K−L+1, K]`, the head at `i`
/// absorbs its mirror partner at `2K−i+1`, so `K` pairs with `K+1` and the
/// lowest merged position pairs with `L`.
pub fn merge_residual_heads<T: Float>(
    layer: &LayerParams<Tensor<T>>,
    order: &[usize],
    keep: usize,
    d_head: usize,
    mode: MergeMode,
) -> Result<LayerParams<Tensor<T>>> {
    let l = order.len();
    if keep == 0 || keep >= l || l > 2 * keep {
        return Err(PruneError::MergeRange { keep, heads: l });
    }
    let mut out = layer.clone();
    for i in (2 * keep + 1 - l)..=keep {
        let kept = order[i - 1];
        let partner = order[2 * keep - i];
        merge_slice(&mut out.wq, kept, partner, d_head);
        if mode == MergeMode::Full {
            merge_slice(&mut out.wk, kept, partner, d_head);
            merge_slice(&mut out.wv, kept, partner, d_head);
            merge_slice(&mut out.wo, kept, partner, d_head);
        }
    }
    Ok(out)
}

/// Kept heads and groups of one layer, plus the merge plan.
struct HeadPlan {
    heads: Vec<usize>,
    groups: Vec<usize>,
    /// `(ordered candidates, keep)` per merge unit.
    merges: Vec<(Vec<usize>, usize)>,
    mode: MergeMode,
}

fn plan_heads(source: &ModelConfig, target: &ModelConfig, order: &[usize], scores: &[f64]) -> Result<HeadPlan> {
    let (h, g) = (source.num_heads, source.num_query_groups);
    let (h2, g2) = (target.num_heads, target.num_query_groups);
    let per = h / g;
    let per2 = h2 / g2;
    let mha = g == h;
    if mha {
        if g2 != h2 {
            return Err(PruneError::GroupShape {
                target: h2,
                groups: g2,
                available: 1,
            });
        }
        // every head is its own group: keep the top heads directly
        let heads = top_sorted(order, h2);
        return Ok(HeadPlan {
            groups: heads.clone(),
            heads,
            merges: vec![(order.to_vec(), h2)],
            mode: MergeMode::Full,
        });
    }
    if per2 > per {
        return Err(PruneError::GroupShape {
            target: h2,
            groups: g2,
            available: per,
        });
    }
    let group_scores: Vec<f64> = (0..g).map(|gi| scores[gi * per..(gi + 1) * per].iter().sum()).collect();
    let group_order = crate::importance::rank_desc(&group_scores);
    let groups = top_sorted(&group_order, g2);
    let mut heads = Vec::with_capacity(h2);
    let mut merges = Vec::new();
    for &gi in &groups {
        let within: Vec<usize> = order.iter().copied().filter(|&x| x / per == gi).collect();
        heads.extend(top_sorted(&within, per2));
        merges.push((within, per2));
    }
    Ok(HeadPlan {
        heads,
        groups,
        merges,
        mode: MergeMode::QueryOnly,
    })
}

fn check_target(source: &ModelConfig, target: &ModelConfig) -> Result<()> {
    target.validate()?;
    if target.vocab_size != source.vocab_size {
        return Err(PruneError::FixedField("vocab_size"));
    }
    if target.d_head != source.d_head {
        return Err(PruneError::FixedField("d_head"));
    }
    if target.tie_embeddings != source.tie_embeddings {
        return Err(PruneError::FixedField("tie_embeddings"));
    }
    if target.max_seq_len != source.max_seq_len {
        return Err(PruneError::FixedField("max_seq_len"));
    }
    let axes = [
        ("num_layers", source.num_layers, target.num_layers),
        ("d_model", source.d_model, target.d_model),
        ("num_heads", source.num_heads, target.num_heads),
        ("num_query_groups", source.num_query_groups, target.num_query_groups),
        ("d_hidden", source.d_hidden, target.d_hidden),
    ];
    for (axis, s, t) in axes {
        if t > s {
            return Err(PruneError::TargetExceedsSource {
                axis,
                current: s,
                target: t,
            });
        }
    }
    Ok(())
}

/// Trims heads and MLP channels per layer and embedding channels globally
/// to reach `target`, keeping the top-ranked units of `report`. With
/// `merge`, pruned heads are first folded into kept ones.
pub fn prune_width<T: Float>(
    model: &Model<T>,
    target: &ModelConfig,
    report: &ImportanceReport,
    merge: bool,
) -> Result<Model<T>> {
    let src = &model.config;
    check_target(src, target)?;
    if target.num_layers != src.num_layers {
        return Err(PruneError::FixedField("num_layers (use prune_depth)"));
    }
    let r = &report.rankings;
    let layers = src.num_layers;

    let emb_kept: Vec<usize> = if target.d_model == src.d_model {
        (0..src.d_model).collect()
    } else {
        check_perm(&r.emb, src.d_model, "embedding channels")?;
        top_sorted(&r.emb, target.d_model)
    };

    let heads_change = target.num_heads != src.num_heads || target.num_query_groups != src.num_query_groups;
    let neurons_change = target.d_hidden != src.d_hidden;
    if heads_change && (r.heads.len() != layers || report.head_scores.len() != layers) {
        return Err(PruneError::IncompleteRankings(format!(
            "head rankings cover {} of {layers} layers",
            r.heads.len()
        )));
    }
    if neurons_change && r.neurons.len() != layers {
        return Err(PruneError::IncompleteRankings(format!(
            "neuron rankings cover {} of {layers} layers",
            r.neurons.len()
        )));
    }

    let dh = src.d_head;
    let mut new_layers = Vec::with_capacity(layers);
    for (li, layer) in model.params.layers.iter().enumerate() {
        let mut layer = layer.clone();
        if heads_change {
            check_perm(&r.heads[li], src.num_heads, &format!("heads of layer {li}"))?;
            if report.head_scores[li].len() != src.num_heads {
                return Err(PruneError::IncompleteRankings(format!("head scores of layer {li}")));
            }
            let plan = plan_heads(src, target, &r.heads[li], &report.head_scores[li])?;
            if merge {
                for (order, keep) in &plan.merges {
                    if *keep < order.len() {
                        layer = merge_residual_heads(&layer, order, *keep, dh, plan.mode)?;
                    }
                }
            }
            let q_rows = expand(&plan.heads, dh);
            let kv_rows = expand(&plan.groups, dh);
            layer.wq = layer.wq.select_rows(&q_rows)?;
            layer.wo = layer.wo.select_rows(&q_rows)?;
            layer.wk = layer.wk.select_rows(&kv_rows)?;
            layer.wv = layer.wv.select_rows(&kv_rows)?;
        }
        if neurons_change {
            check_perm(&r.neurons[li], src.d_hidden, &format!("neurons of layer {li}"))?;
            let kept = top_sorted(&r.neurons[li], target.d_hidden);
            layer.w1 = layer.w1.select_rows(&kept)?;
            layer.w2 = layer.w2.select_rows(&kept)?;
        }
        new_layers.push(layer);
    }

    let mut params = model.params.clone();
    params.layers = new_layers;
    if target.d_model != src.d_model {
        params = params.try_map(|t| t.select_cols(&emb_kept))?;
    }
    Ok(Model::from_params(*target, params)?)
}

/// Removes the listed blocks; the residual stream passes straight through.
pub fn prune_depth<T: Float>(model: &Model<T>, layer_indices: &[usize]) -> Result<Model<T>> {
    let layers = model.config.num_layers;
    let mut remove = vec![false; layers];
    for &i in layer_indices {
        if i >= layers {
            return Err(PruneError::LayerIndex { index: i, layers });
        }
        if std::mem::replace(&mut remove[i], true) {
            return Err(PruneError::DuplicateLayer(i));
        }
    }
    if layer_indices.len() == layers {
        return Err(PruneError::RemovesAllLayers);
    }
    let mut params = model.params.clone();
    params.layers = model
        .params
        .layers
        .iter()
        .zip(&remove)
        .filter(|(_, &r)| !r)
        .map(|(l, _)| l.clone())
        .collect();
    let mut config = model.config;
    config.num_layers = params.layers.len();
    Ok(Model::from_params(config, params)?)
}

/// Removes `spec.layers_to_remove` (if any) then trims width to `spec.target`.
pub fn prune<T: Float>(model: &Model<T>, spec: &PruneSpec, report: &ImportanceReport) -> Result<Model<T>> {
    let remove = spec.layers_to_remove.clone().unwrap_or_default();
    if model.config.num_layers - remove.len().min(model.config.num_layers) != spec.target.num_layers {
        return Err(PruneError::IncompleteRankings(format!(
            "removing {} of {} layers does not reach {}",
            remove.len(),
            model.config.num_layers,
            spec.target.num_layers
        )));
    }
    let shallow = prune_depth(model, &remove)?;
    let kept: Vec<usize> = (0..model.config.num_layers).filter(|i| !remove.contains(i)).collect();
    let sub = report_for_layers(report, &kept)?;
    prune_width(&shallow, &spec.target, &sub, spec.merge_residual_heads)
}

/// Restricts per-layer scores and rankings to the surviving layers.
pub fn report_for_layers(report: &ImportanceReport, kept: &[usize]) -> Result<ImportanceReport> {
    let pick = |v: &Vec<Vec<f64>>| -> Result<Vec<Vec<f64>>> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        kept.iter()
            .map(|&i| {
                v.get(i).cloned().ok_or(PruneError::LayerIndex {
                    index: i,
                    layers: v.len(),
                })
            })
            .collect()
    };
    let width = crate::importance::WidthScores {
        heads: pick(&report.head_scores)?,
        neurons: pick(&report.neuron_scores)?,
        emb: report.emb_scores.clone(),
    };
    let mut config = report.config;
    config.num_layers = kept.len();
    let mut out = ImportanceReport::from_scores(
        config,
        report.agg_used,
        report.calibration.clone(),
        width,
        None,
        None,
        Vec::new(),
    );
    // carry the recorded rankings over verbatim
    let pick_rank = |v: &Vec<Vec<usize>>| -> Vec<Vec<usize>> {
        if v.is_empty() {
            Vec::new()
        } else {
            kept.iter().filter_map(|&i| v.get(i).cloned()).collect()
        }
    };
    out.rankings.heads = pick_rank(&report.rankings.heads);
    out.rankings.neurons = pick_rank(&report.rankings.neurons);
    out.rankings.emb = report.rankings.emb.clone();
    Ok(out)
}

/// Depth-selection metric for [`apply_candidate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMetric {
    /// Drop the layers whose removal hurts perplexity least.
    Ppl,
    /// Drop the layers with the lowest block influence.
    Bi,
    /// Drop the contiguous block with the lowest block influence.
    BlockBi,
}

/// Axes a pruning run may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneAxes {
    pub depth: bool,
    pub mlp: bool,
    pub attn: bool,
    pub emb: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyOptions {
    pub axes: PruneAxes,
    pub depth_metric: DepthMetric,
    pub merge_residual_heads: bool,
}

impl ApplyOptions {
    pub fn all() -> Self {
        Self {
            axes: PruneAxes {
                depth: true,
                mlp: true,
                attn: true,
                emb: true,
            },
            depth_metric: DepthMetric::Ppl,
            merge_residual_heads: false,
        }
    }

    pub fn depth_only(metric: DepthMetric) -> Self {
        Self {
            axes: PruneAxes {
                depth: true,
                mlp: false,
                attn: false,
                emb: false,
            },
            depth_metric: metric,
            merge_residual_heads: false,
        }
    }

    pub fn mlp_attn_emb() -> Self {
        let mut o = Self::all();
        o.axes.depth = false;
        o
    }

    pub fn mlp_attn() -> Self {
        let mut o = Self::mlp_attn_emb();
        o.axes.emb = false;
        o
    }
}

/// Layers to drop under `metric`, in ascending order.
pub fn select_layers_to_remove(report: &ImportanceReport, count: usize, metric: DepthMetric) -> Result<Vec<usize>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let layers = report.config.num_layers;
    let mut out = match metric {
        DepthMetric::Ppl | DepthMetric::Bi => {
            let ranking = match metric {
                DepthMetric::Ppl => report.rankings.layers_ppl.as_ref(),
                _ => report.rankings.layers_bi.as_ref(),
            }
            .ok_or_else(|| PruneError::IncompleteRankings("layer scores missing".into()))?;
            check_perm(ranking, layers, "layers")?;
            if count >= layers {
                return Err(PruneError::RemovesAllLayers);
            }
            ranking[layers - count..].to_vec()
        }
        DepthMetric::BlockBi => {
            let b = report
                .least_important_block(count)
                .ok_or_else(|| PruneError::IncompleteRankings(format!("no block scores of length {count}")))?;
            (b.start..b.start + b.length).collect()
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// Depth pruning followed by width pruning, reaching `candidate` exactly.
pub fn apply_candidate<T: Float>(
    model: &Model<T>,
    candidate: &ModelConfig,
    report: &ImportanceReport,
    options: &ApplyOptions,
) -> Result<Model<T>> {
    let src = &model.config;
    check_target(src, candidate)?;
    let a = options.axes;
    if !a.depth && candidate.num_layers != src.num_layers {
        return Err(PruneError::AxisDisabled("depth"));
    }
    if !a.mlp && candidate.d_hidden != src.d_hidden {
        return Err(PruneError::AxisDisabled("mlp"));
    }
    if !a.attn && (candidate.num_heads != src.num_heads || candidate.num_query_groups != src.num_query_groups) {
        return Err(PruneError::AxisDisabled("attn"));
    }
    if !a.emb && candidate.d_model != src.d_model {
        return Err(PruneError::AxisDisabled("emb"));
    }
    let remove = select_layers_to_remove(report, src.num_layers - candidate.num_layers, options.depth_metric)?;
    prune(
        model,
        &PruneSpec {
            target: *candidate,
            layers_to_remove: Some(remove),
            merge_residual_heads: options.merge_residual_heads,
        },
        report,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_fitting() {
        assert_eq!(fit_groups(6, 2), 2);
        assert_eq!(fit_groups(6, 4), 3);
        assert_eq!(fit_groups(5, 2), 1);
        assert_eq!(fit_groups(32, 8), 8);
    }

    #[test]
    fn top_sorted_keeps_index_order() {
        assert_eq!(top_sorted(&[4, 0, 3, 1, 2], 3), vec![0, 3, 4]);
    }
}
