//! On-disk formats: checkpoints, token datasets, calibration sampling and
//! pipeline configuration.

mod checkpoint;
mod config;
mod dataset;

use std::fs::File;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, decode_header, directory, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{
    apply_override, DataConfig, DistillSection, EvalConfig, ImportanceConfig, PipelineConfig, PruneConfig, SearchConfig,
    SyntheticData,
};
pub use dataset::{
    assign_split, eval_batches, ingest_str, ingest_text, sample_calibration, splitmix64, synthetic_corpus,
    tokenize_bytes, BatchSampler, BigramSource, DatasetManifest, Document, Split, SplitFractions, TokenDataset, BOS,
    BYTE_VOCAB, EOS, TOKENIZER_VOCAB,
};

use crate::model::ModelError;
use crate::TensorError;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("magic: expected \"MTRF\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("version: file has format {found}, this build reads {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("{field}: truncated, need {expected} bytes, have {actual}")]
    Truncated {
        field: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("header: {0}")]
    Header(String),
    #[error("tensor directory: {0}")]
    Directory(String),
    #[error("dataset manifest: {0}")]
    Manifest(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("input contains no tokens")]
    EmptyInput,
    #[error("cannot draw {requested} windows of {seq_len} tokens from {available} available")]
    InsufficientData {
        requested: usize,
        seq_len: usize,
        available: usize,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Writes through a temporary file in the destination directory, then renames.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut File) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    write(tmp.as_file_mut()).map_err(|e| IoError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}
