//! Word-embedding table, word2vec text-format loader, and sentence
//! conditions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Vocabulary -> embedding vector map. Out-of-vocabulary words resolve to a
/// deterministic unit-norm vector derived from `(oov_seed, word)`, so a
/// table with no entries doubles as a fully synthetic embedding source.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingTable {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
    oov_seed: u64,
}

impl WordEmbeddingTable {
    pub fn new(dimension: usize, oov_seed: u64) -> Result<WordEmbeddingTable> {
        if dimension == 0 {
            return Err(Error::arg("embedding dimension must be positive".to_string()));
        }
        Ok(WordEmbeddingTable {
            dimension,
            entries: BTreeMap::new(),
            oov_seed,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dimension {
            return Err(Error::shape(format!(
                "embedding for {word:?} has {} values, table dimension is {}",
                vector.len(),
                self.dimension
            )));
        }
        if self.entries.contains_key(word) {
            return Err(Error::Parse(format!("duplicate word {word:?}")));
        }
        self.entries.insert(word.to_string(), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    /// Iterates entries in sorted word order (stable for serialization).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }

    /// Vector for `word`: the stored entry, or the seeded unit-norm
    /// out-of-vocabulary vector.
    pub fn lookup(&self, word: &str) -> Vec<f64> {
        if let Some(v) = self.entries.get(word) {
            return v.clone();
        }
        let mut r = rng::stream(self.oov_seed, &format!("oov:{word}"), 0);
        loop {
            let v = rng::normal_vec(&mut r, self.dimension, 1.0);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// Reads the word2vec text format: a `"<vocab_count> <dimension>"` header
/// line, then one `"word v1 .. vd"` line per entry.
pub fn load_word_vectors(path: &Path) -> Result<WordEmbeddingTable> {
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut lines = BufReader::new(file).lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty embedding file".to_string()))??;
    let mut parts = header.split_whitespace();
    let vocab_count: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("malformed header {header:?}")))?;
    let dimension: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse(format!("malformed header {header:?}")))?;
    if parts.next().is_some() || dimension == 0 {
        return Err(Error::Parse(format!("malformed header {header:?}")));
    }

    let mut table = WordEmbeddingTable::new(dimension, 0)?;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields
            .next()
            .ok_or_else(|| Error::Parse("embedding row without a word".to_string()))?;
        let values: Vec<f64> = fields
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number {s:?} in row for {word:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dimension {
            return Err(Error::Parse(format!(
                "row for {word:?} has {} values, dimension is {dimension}",
                values.len()
            )));
        }
        table.insert(word, values)?;
    }
    if table.len() != vocab_count {
        return Err(Error::Parse(format!(
            "header declares {vocab_count} entries, file has {}",
            table.len()
        )));
    }
    Ok(table)
}

/// Per-word input vectors `[x(1) .. x(n)]`, one per token.
pub fn embed_words(table: &WordEmbeddingTable, tokens: &[String]) -> Result<Vec<Tensor>> {
    if tokens.is_empty() {
        return Err(Error::arg("cannot embed an empty token list".to_string()));
    }
    tokens
        .iter()
        .map(|t| Tensor::new(vec![table.dimension()], table.lookup(t)))
        .collect()
}

/// Fixed-length sentence condition vector consumed by the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceCondition {
    pub vector: Tensor,
}

impl SentenceCondition {
    pub fn dimension(&self) -> usize {
        self.vector.numel()
    }
}

/// Mean-pooled condition: the arithmetic mean of the per-word vectors, so the
/// condition length equals the embedding dimension.
pub fn sentence_condition_mean(
    table: &WordEmbeddingTable,
    tokens: &[String],
) -> Result<SentenceCondition> {
    let vectors = embed_words(table, tokens)?;
    let dim = table.dimension();
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        for (acc, &x) in mean.iter_mut().zip(v.data()) {
            *acc += x;
        }
    }
    let n = vectors.len() as f64;
    for acc in mean.iter_mut() {
        *acc /= n;
    }
    Ok(SentenceCondition {
        vector: Tensor::new(vec![dim], mean)?,
    })
}

/// Conditions precomputed elsewhere, one `"caption_id v1 .. vT"` line per
/// caption.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedConditions {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedConditions {
    pub fn load(path: &Path) -> Result<PrecomputedConditions> {
        let file = File::open(path)?;
        let mut entries = BTreeMap::new();
        let mut dimension = None;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields
                .next()
                .ok_or_else(|| Error::Parse("condition row without an id".to_string()))?
                .to_string();
            let values: Vec<f64> = fields
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad number {s:?} for condition {id:?}")))
                })
                .collect::<Result<_>>()?;
            if values.is_empty() {
                return Err(Error::Parse(format!("condition {id:?} has no values")));
            }
            match dimension {
                None => dimension = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::Parse(format!(
                        "condition {id:?} has {} values, previous rows have {d}",
                        values.len()
                    )));
                }
                _ => {}
            }
            if entries.insert(id.clone(), values).is_some() {
                return Err(Error::Parse(format!("duplicate condition id {id:?}")));
            }
        }
        let dimension =
            dimension.ok_or_else(|| Error::Parse("empty condition file".to_string()))?;
        Ok(PrecomputedConditions { dimension, entries })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn get(&self, caption_id: &str) -> Result<SentenceCondition> {
        let values = self
            .entries
            .get(caption_id)
            .ok_or_else(|| Error::arg(format!("no condition stored for caption {caption_id:?}")))?;
        Ok(SentenceCondition {
            vector: Tensor::new(vec![self.dimension], values.clone())?,
        })
    }
}
