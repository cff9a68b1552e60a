use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ImportanceError;
use crate::tensor::{Float, Tensor};

/// Reduction collapsing a sequence of per-token scores to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    /// `(1/n) Σ |s|`
    #[serde(alias = "mean")]
    MeanAbs,
    /// `√(Σ s²)`
    L2,
    /// `(1/n) Σ (s − s̄)²`
    #[serde(alias = "var")]
    Variance,
}

impl AggFn {
    pub const ALL: [AggFn; 3] = [AggFn::MeanAbs, AggFn::L2, AggFn::Variance];

    /// Sequential reduction. Returns 0 for an empty slice.
    pub fn apply(self, xs: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let n = xs.len() as f64;
        match self {
            AggFn::MeanAbs => xs.iter().map(|x| x.abs()).sum::<f64>() / n,
            AggFn::L2 => xs.iter().map(|x| x * x).sum::<f64>().sqrt(),
            AggFn::Variance => {
                let mean = xs.iter().sum::<f64>() / n;
                xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AggFn::MeanAbs => "mean_abs",
            AggFn::L2 => "l2",
            AggFn::Variance => "variance",
        }
    }
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggFn {
    type Err = ImportanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean_abs" | "mean" => Ok(AggFn::MeanAbs),
            "l2" => Ok(AggFn::L2),
            "variance" | "var" => Ok(AggFn::Variance),
            other => Err(ImportanceError::UnknownAggregation(other.to_string())),
        }
    }
}

/// How per-token scores are reduced: `seq_fn` over each sample's positions
/// first, then `batch_fn` over the per-sample results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub batch_fn: AggFn,
    pub seq_fn: AggFn,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self {
            batch_fn: AggFn::L2,
            seq_fn: AggFn::MeanAbs,
        }
    }
}

impl AggregationSpec {
    pub fn new(batch_fn: AggFn, seq_fn: AggFn) -> Self {
        Self { batch_fn, seq_fn }
    }

    /// All nine `(batch_fn, seq_fn)` combinations.
    pub fn all() -> impl Iterator<Item = AggregationSpec> {
        AggFn::ALL
            .into_iter()
            .flat_map(|b| AggFn::ALL.into_iter().map(move |s| AggregationSpec::new(b, s)))
    }
}

impl fmt::Display for AggregationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "batch={}, seq={}", self.batch_fn, self.seq_fn)
    }
}

/// Reduces a `[B × S]` score tensor to a scalar.
pub fn aggregate<T: Float>(scores: &Tensor<T>, spec: AggregationSpec) -> Result<f64, ImportanceError> {
    if scores.rank() != 2 || scores.numel() == 0 {
        return Err(ImportanceError::Empty("score tensor"));
    }
    let per_sample: Vec<f64> = (0..scores.rows())
        .map(|b| {
            let row: Vec<f64> = scores.row(b).iter().map(|v| v.to_f64c()).collect();
            spec.seq_fn.apply(&row)
        })
        .collect();
    Ok(spec.batch_fn.apply(&per_sample))
}

/// Per-sample sequence aggregates of a `[batch·seq × units]` matrix of
/// per-token scores, returned as `[batch][units]`.
pub(crate) fn seq_aggregate(values: &[f64], batch: usize, seq: usize, units: usize, f: AggFn) -> Vec<Vec<f64>> {
    let mut column = vec![0.0; seq];
    (0..batch)
        .map(|b| {
            (0..units)
                .map(|u| {
                    for (s, c) in column.iter_mut().enumerate() {
                        *c = values[(b * seq + s) * units + u];
                    }
                    f.apply(&column)
                })
                .collect()
        })
        .collect()
}

/// Applies `f` across samples for every unit of a `[batch][units]` table.
pub(crate) fn batch_aggregate(per_sample: &[Vec<f64>], f: AggFn) -> Vec<f64> {
    let units = per_sample.first().map_or(0, Vec::len);
    let mut column = vec![0.0; per_sample.len()];
    (0..units)
        .map(|u| {
            for (b, c) in column.iter_mut().enumerate() {
                *c = per_sample[b][u];
            }
            f.apply(&column)
        })
        .collect()
}
