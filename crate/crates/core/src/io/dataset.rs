//! Token datasets, byte-level tokenization and sampling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{atomic_write, IoError, Result};
use crate::TokenBatch;

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// Bytes plus the two reserved specials.
pub const TOKENIZER_VOCAB: usize = 258;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = IoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(IoError::UnknownSplit(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub start: usize,
    pub len: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocab_size: usize,
    pub num_tokens: usize,
    pub seed: u64,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub tokens: Vec<u32>,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { valid: 0.1, test: 0.0 }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split assignment depends only on the seed and the document's index.
pub fn assign_split(seed: u64, index: usize, fractions: SplitFractions) -> Split {
    let u = (splitmix64(seed ^ splitmix64(index as u64)) >> 11) as f64 / (1u64 << 53) as f64;
    if u < fractions.valid {
        Split::Valid
    } else if u < fractions.valid + fractions.test {
        Split::Test
    } else {
        Split::Train
    }
}

pub fn tokenize_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

impl TokenDataset {
    /// Builds a dataset from pre-tokenized documents.
    pub fn from_documents(docs: &[Vec<u32>], vocab_size: usize, seed: u64, fractions: SplitFractions) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut documents = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if let Some(&id) = d.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(IoError::TokenOutOfRange { id, vocab: vocab_size });
            }
            documents.push(Document {
                start: tokens.len(),
                len: d.len(),
                split: assign_split(seed, i, fractions),
            });
            tokens.extend_from_slice(d);
        }
        if tokens.is_empty() {
            return Err(IoError::EmptyInput);
        }
        Ok(Self {
            manifest: DatasetManifest {
                vocab_size,
                num_tokens: tokens.len(),
                seed,
                documents,
            },
            tokens,
        })
    }

    /// Concatenation of every document in `split`, in document order.
    pub fn split_tokens(&self, split: Split) -> Vec<u32> {
        self.manifest
            .documents
            .iter()
            .filter(|d| d.split == split)
            .flat_map(|d| self.tokens[d.start..d.start + d.len].iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.num_tokens != self.tokens.len() {
            return Err(IoError::Manifest(format!(
                "manifest lists {} tokens, file holds {}",
                m.num_tokens,
                self.tokens.len()
            )));
        }
        let mut cursor = 0;
        for d in &m.documents {
            if d.start != cursor {
                return Err(IoError::Manifest(format!("document at {} leaves a gap or overlap", d.start)));
            }
            cursor += d.len;
        }
        if cursor != self.tokens.len() {
            return Err(IoError::Manifest("documents do not cover the token file".into()));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= m.vocab_size) {
            return Err(IoError::TokenOutOfRange { id, vocab: m.vocab_size });
        }
        Ok(())
    }

    pub fn manifest_path(tokens_path: &Path) -> PathBuf {
        tokens_path.with_extension("json")
    }

    /// Writes `path` (raw u32 LE ids) and a JSON manifest beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, |f| {
            let mut buf = Vec::with_capacity(self.tokens.len() * 4);
            for t in &self.tokens {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            f.write_all(&buf)
        })?;
        let json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        atomic_write(&Self::manifest_path(path), |f| f.write_all(&json))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| IoError::io(path, e))?;
        if raw.len() % 4 != 0 {
            return Err(IoError::Truncated {
                field: "tokens",
                expected: raw.len().next_multiple_of(4) as u64,
                actual: raw.len() as u64,
            });
        }
        let tokens = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        let mpath = Self::manifest_path(path);
        let mraw = fs::read(&mpath).map_err(|e| IoError::io(&mpath, e))?;
        let manifest = serde_json::from_slice(&mraw).map_err(|e| IoError::Manifest(e.to_string()))?;
        let ds = Self { tokens, manifest };
        ds.validate()?;
        Ok(ds)
    }
}

/// Byte-tokenizes a text file. Documents are separated by blank lines.
pub fn ingest_text(path: &Path, seed: u64, fractions: SplitFractions) -> Result<TokenDataset> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    ingest_str(&text, seed, fractions)
}

pub fn ingest_str(text: &str, seed: u64, fractions: SplitFractions) -> Result<TokenDataset> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(tokenize_bytes(&std::mem::take(&mut current)));
            }
        } else {
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        docs.push(tokenize_bytes(&current));
    }
    if docs.is_empty() {
        return Err(IoError::EmptyInput);
    }
    TokenDataset::from_documents(&docs, TOKENIZER_VOCAB, seed, fractions)
}

/// `n` distinct non-overlapping windows of `seq_len` tokens.
pub fn sample_calibration(tokens: &[u32], n: usize, seq_len: usize, seed: u64) -> Result<TokenBatch> {
    let windows = tokens.len().checked_div(seq_len).unwrap_or(0);
    if n == 0 || seq_len == 0 || n > windows {
        return Err(IoError::InsufficientData {
            requested: n,
            seq_len,
            available: windows,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n * seq_len);
    for w in sample(&mut rng, windows, n).into_iter() {
        ids.extend_from_slice(&tokens[w * seq_len..(w + 1) * seq_len]);
    }
    Ok(TokenBatch::new(n, seq_len, ids))
}

/// Consecutive non-overlapping windows, for deterministic evaluation.
pub fn eval_batches(tokens: &[u32], batch: usize, seq_len: usize, max_batches: usize) -> Result<Vec<TokenBatch>> {
    let windows = tokens.len().checked_div(seq_len).unwrap_or(0);
    let n = (windows / batch.max(1)).min(max_batches);
    if n == 0 {
        return Err(IoError::InsufficientData {
            requested: batch,
            seq_len,
            available: windows,
        });
    }
    Ok((0..n)
        .map(|b| {
            let start = b * batch * seq_len;
            TokenBatch::new(batch, seq_len, tokens[start..start + batch * seq_len].to_vec())
        })
        .collect())
}

/// Random training windows drawn with replacement from a token stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(tokens: Vec<u32>, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch == 0 || seq_len < 2 || tokens.len() < seq_len {
            return Err(IoError::InsufficientData {
                requested: batch,
                seq_len,
                available: tokens.len() / seq_len.max(1),
            });
        }
        Ok(Self {
            tokens,
            batch,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let span = self.tokens.len() - self.seq_len + 1;
        let mut ids = Vec::with_capacity(self.batch * self.seq_len);
        for _ in 0..self.batch {
            let s = self.rng.random_range(0..span);
            ids.extend_from_slice(&self.tokens[s..s + self.seq_len]);
        }
        TokenBatch::new(self.batch, self.seq_len, ids)
    }
}

/// A sparse first-order Markov source: every token has `branching`
/// successors with geometrically decaying probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramSource {
    pub vocab: usize,
    pub successors: Vec<Vec<(u32, f64)>>,
}

impl BigramSource {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..branching).map(|i| 0.5f64.powi(i as i32)).collect();
        let z: f64 = weights.iter().sum();
        let successors = (0..vocab)
            .map(|_| {
                sample(&mut rng, vocab, branching.min(vocab))
                    .into_iter()
                    .zip(&weights)
                    .map(|(t, w)| (t as u32, w / z))
                    .collect()
            })
            .collect();
        Self { vocab, successors }
    }

    /// Next-token entropy in nats. Every state shares the same successor
    /// weights, so this is also the entropy rate: the best achievable LM loss.
    pub fn conditional_entropy(&self) -> f64 {
        self.successors[0].iter().map(|(_, p)| -p * p.ln()).sum()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = rng.random_range(0..self.vocab) as u32;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(t);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let succ = &self.successors[t as usize];
            t = succ.last().unwrap().0;
            for &(s, p) in succ {
                acc += p;
                if u < acc {
                    t = s;
                    break;
                }
            }
        }
        out
    }
}

/// A synthetic corpus from a seeded bigram source, cut into `docs` documents.
pub fn synthetic_corpus(
    vocab: usize,
    branching: usize,
    tokens: usize,
    docs: usize,
    seed: u64,
    fractions: SplitFractions,
) -> Result<TokenDataset> {
    let source = BigramSource::new(vocab, branching, seed);
    let stream = source.generate(tokens, seed.wrapping_add(1));
    let per = tokens.div_ceil(docs.max(1));
    let documents: Vec<Vec<u32>> = stream.chunks(per.max(1)).map(|c| c.to_vec()).collect();
    TokenDataset::from_documents(&documents, vocab, seed, fractions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_tokenize_to_their_values() {
        assert_eq!(tokenize_bytes("ab"), vec![97, 98]);
        let ds = ingest_str("ab", 0, SplitFractions { valid: 0.0, test: 0.0 }).unwrap();
        assert_eq!(ds.tokens, vec![97, 98]);
        assert_eq!(ds.manifest.documents.len(), 1);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(ingest_str("\n\n  \n", 0, SplitFractions::default()), Err(IoError::EmptyInput)));
    }

    #[test]
    fn bigram_rows_are_distributions() {
        let s = BigramSource::new(32, 4, 3);
        for row in &s.successors {
            assert!((row.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.generate(100, 1), s.generate(100, 1));
    }
}
