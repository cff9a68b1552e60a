//! Declarative pipeline configuration in TOML, with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IoError, Result, Split, SplitFractions};
use crate::distill::{DistillConfig, TrainOptions};
use crate::importance::ReportOptions;
use crate::pruner::ApplyOptions;
use crate::search::{CountMode, SearchSpace};
use crate::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    /// Successors per token in the bigram source.
    pub branching: usize,
    pub tokens: usize,
    pub documents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Token file to read; when absent the synthetic corpus below is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticData,
    pub splits: SplitFractions,
    pub batch: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    pub samples: usize,
    pub seq_len: usize,
    pub report: ReportOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub budget: u64,
    pub tolerance: f64,
    #[serde(default)]
    pub count_mode: CountMode,
    /// Retraining per candidate; zero steps skips ranking.
    pub retrain: TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Explicit target; otherwise the top-ranked search candidate is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ModelConfig>,
    pub apply: ApplyOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub loss: DistillConfig,
    pub train: TrainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub batch: usize,
    pub seq_len: usize,
    pub max_batches: usize,
}

/// Every setting of the train → importance → search → prune → distill → eval recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainOptions,
    pub importance: ImportanceConfig,
    pub search: SearchConfig,
    pub prune: PruneConfig,
    pub distill: DistillSection,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// The toy recipe: a 4-layer, 64-wide teacher on a synthetic bigram
    /// corpus, searched down to roughly half its parameters.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            seed: 0,
            model,
            data: DataConfig {
                path: None,
                synthetic: SyntheticData {
                    branching: 8,
                    tokens: 200_000,
                    documents: 50,
                },
                splits: SplitFractions { valid: 0.1, test: 0.1 },
                batch: 8,
                seq_len: 64,
            },
            train: TrainOptions::toy(600),
            importance: ImportanceConfig {
                samples: 32,
                seq_len: 64,
                report: ReportOptions::default(),
            },
            search: SearchConfig {
                space: SearchSpace {
                    layer_range: (3, 4),
                    head_choices: vec![4, 8],
                    mlp_expansion_factors: vec![2.0, 3.0, 4.0],
                    embedding_choices: vec![32, 48, 64],
                    d_head: model.d_head,
                    vocab: model.vocab_size,
                    tie_embeddings: model.tie_embeddings,
                    num_query_groups: model.num_query_groups,
                    max_seq_len: model.max_seq_len,
                    mlp_multiple: 16,
                },
                budget: 100_000,
                tolerance: 0.1,
                count_mode: CountMode::Total,
                retrain: TrainOptions {
                    eval_every: 20,
                    ..TrainOptions::toy(60)
                },
            },
            prune: PruneConfig {
                target: None,
                apply: ApplyOptions::all(),
            },
            distill: DistillSection {
                loss: DistillConfig::default(),
                train: TrainOptions {
                    eval_every: 50,
                    ..TrainOptions::toy(300)
                },
            },
            eval: EvalConfig {
                split: Split::Test,
                batch: 8,
                seq_len: 64,
                max_batches: 8,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline configs always serialize")
    }

    /// Parses `text` after applying `key.path=value` overrides in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        doc.try_into().map_err(|e: toml::de::Error| IoError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    /// The toy defaults with overrides applied.
    pub fn toy_with(overrides: &[String]) -> Result<Self> {
        Self::from_toml_with(&Self::toy().to_toml(), overrides)
    }
}

/// Sets `a.b.c` to `value` in a TOML table. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let bad = |m: &str| IoError::Config(format!("override {assignment:?}: {m}"));
    let (path, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| bad(&format!("{k} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
