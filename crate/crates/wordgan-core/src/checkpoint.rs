//! Checkpoint file format: the 8-byte magic `LCGAN001`, a little-endian u64
//! manifest length, a JSON manifest (tensor names, shapes, offsets,
//! precision, counters, config echo), then raw little-endian f64 element
//! data. Save followed by load is bit-exact for every tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamSet, AdamState};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;
use crate::text::WordEmbeddingTable;
use crate::train::{AdamStates, Models, TrainingConfig};

pub const MAGIC: &[u8; 8] = b"LCGAN001";

#[derive(Serialize, Deserialize, Debug, Clone)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct EmbeddingMeta {
    dimension: usize,
    oov_seed: u64,
    words: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct AdamCounters {
    lstm: u64,
    gen: u64,
    disc: u64,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
struct Manifest {
    precision: String,
    iteration: u64,
    config: TrainingConfig,
    embedding: EmbeddingMeta,
    adam_t: AdamCounters,
    tensors: Vec<TensorEntry>,
}

/// Complete training state: all three parameter sets, Adam moments, the
/// iteration counter, the config echo, and the embedding table (so
/// generation from a checkpoint needs no other inputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub models: Models,
    pub adam: AdamStates,
    pub iteration: u64,
    pub config: TrainingConfig,
    pub table: WordEmbeddingTable,
}

struct Writer {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Writer {
    fn new() -> Writer {
        Writer {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: &[usize], values: &[f64]) {
        self.entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.data.len() as u64,
            len: values.len() as u64,
        });
        self.data.extend_from_slice(values);
    }

    fn push_tensor(&mut self, name: String, t: &Tensor) {
        self.push(name, t.shape(), t.data());
    }
}

fn push_adam(w: &mut Writer, prefix: &str, names: &[(String, &Tensor)], set: &AdamSet) {
    for ((name, tensor), state) in names.iter().zip(&set.states) {
        w.push(format!("{prefix}.{name}.m"), tensor.shape(), &state.m);
        w.push(format!("{prefix}.{name}.v"), tensor.shape(), &state.v);
    }
}

impl Checkpoint {
    /// Serializes and writes atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        for (name, t) in self.models.lstm.trainable() {
            w.push_tensor(format!("lstm.{name}"), t);
        }
        for (name, t) in self.models.gen.trainable() {
            w.push_tensor(format!("gen.{name}"), t);
        }
        for (name, values) in self.models.gen.buffers() {
            let shape = vec![values.len()];
            w.push(format!("gen.{name}"), &shape, &values);
        }
        for (name, t) in self.models.disc.trainable() {
            w.push_tensor(format!("disc.{name}"), t);
        }
        for (name, values) in self.models.disc.buffers() {
            let shape = vec![values.len()];
            w.push(format!("disc.{name}"), &shape, &values);
        }
        push_adam(&mut w, "adam.lstm", &self.models.lstm.trainable(), &self.adam.lstm);
        push_adam(&mut w, "adam.gen", &self.models.gen.trainable(), &self.adam.gen);
        push_adam(&mut w, "adam.disc", &self.models.disc.trainable(), &self.adam.disc);

        let words: Vec<String> = self.table.iter().map(|(word, _)| word.to_string()).collect();
        if !words.is_empty() {
            let dim = self.table.dimension();
            let mut flat = Vec::with_capacity(words.len() * dim);
            for (_, v) in self.table.iter() {
                flat.extend_from_slice(v);
            }
            w.push("embedding.vectors".to_string(), &[words.len(), dim], &flat);
        }

        let manifest = Manifest {
            precision: "f64".to_string(),
            iteration: self.iteration,
            config: self.config.clone(),
            embedding: EmbeddingMeta {
                dimension: self.table.dimension(),
                oov_seed: self.table.oov_seed(),
                words,
            },
            adam_t: AdamCounters {
                lstm: self.adam.lstm.states.first().map(|s| s.t).unwrap_or(0),
                gen: self.adam.gen.states.first().map(|s| s.t).unwrap_or(0),
                disc: self.adam.disc.states.first().map(|s| s.t).unwrap_or(0),
            },
            tensors: w.entries.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode failed: {e}")))?;

        let mut bytes =
            Vec::with_capacity(8 + 8 + manifest_bytes.len() + w.data.len() * 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&manifest_bytes);
        for v in &w.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fsio::atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let (manifest, data_start) = read_manifest(&bytes, path)?;
        if manifest.precision != "f64" {
            return Err(Error::Checkpoint(format!(
                "unsupported precision {:?}",
                manifest.precision
            )));
        }

        let mut reader = Reader {
            bytes: &bytes,
            data_start,
            entries: &manifest.tensors,
        };

        // Rebuild the structural skeleton from the config echo, then fill
        // every tensor by name.
        let mut models = Models::init(&manifest.config)?;
        for (name, t) in models.lstm.trainable_mut() {
            reader.fill(&format!("lstm.{name}"), t)?;
        }
        for (name, t) in models.gen.trainable_mut() {
            reader.fill(&format!("gen.{name}"), t)?;
        }
        for (name, _) in models.gen.buffers() {
            let values = reader.read_vec(&format!("gen.{name}"))?;
            models.gen.set_buffer(&name, values)?;
        }
        for (name, t) in models.disc.trainable_mut() {
            reader.fill(&format!("disc.{name}"), t)?;
        }
        for (name, _) in models.disc.buffers() {
            let values = reader.read_vec(&format!("disc.{name}"))?;
            models.disc.set_buffer(&name, values)?;
        }

        let hyper = manifest.config.adam_hyper();
        let adam = AdamStates {
            lstm: read_adam(&mut reader, "adam.lstm", &models.lstm.trainable(), manifest.adam_t.lstm, hyper)?,
            gen: read_adam(&mut reader, "adam.gen", &models.gen.trainable(), manifest.adam_t.gen, hyper)?,
            disc: read_adam(&mut reader, "adam.disc", &models.disc.trainable(), manifest.adam_t.disc, hyper)?,
        };

        let mut table =
            WordEmbeddingTable::new(manifest.embedding.dimension, manifest.embedding.oov_seed)?;
        if !manifest.embedding.words.is_empty() {
            let flat = reader.read_vec("embedding.vectors")?;
            let dim = manifest.embedding.dimension;
            if flat.len() != manifest.embedding.words.len() * dim {
                return Err(Error::Checkpoint(format!(
                    "embedding.vectors holds {} values, expected {}",
                    flat.len(),
                    manifest.embedding.words.len() * dim
                )));
            }
            for (i, word) in manifest.embedding.words.iter().enumerate() {
                table.insert(word, flat[i * dim..(i + 1) * dim].to_vec())?;
            }
        }

        Ok(Checkpoint {
            models,
            adam,
            iteration: manifest.iteration,
            config: manifest.config,
            table,
        })
    }

    /// Structural fields that must agree before a checkpoint can seed a
    /// resumed run (epochs and checkpoint cadence may change).
    pub fn check_structural_match(&self, config: &TrainingConfig) -> Result<()> {
        let mut a = self.config.clone();
        let mut b = config.clone();
        a.epochs = 0;
        b.epochs = 0;
        a.checkpoint_interval = 1;
        b.checkpoint_interval = 1;
        if a != b {
            return Err(Error::Checkpoint(
                "checkpoint config does not match the requested run (only epochs and \
                 checkpoint_interval may differ on resume)"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// Manifest JSON of a checkpoint file, for inspection.
pub fn manifest_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    let (manifest, _) = read_manifest(&bytes, path)?;
    serde_json::to_value(&manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))
}

fn read_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + manifest_len;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint(format!(
            "truncated manifest: need {} bytes, file has {}",
            data_start,
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
    Ok((manifest, data_start))
}

struct Reader<'a> {
    bytes: &'a [u8],
    data_start: usize,
    entries: &'a [TensorEntry],
}

impl<'a> Reader<'a> {
    fn entry(&self, name: &str) -> Result<&'a TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("manifest has no entry {name:?}")))
    }

    fn read_entry(&self, e: &TensorEntry) -> Result<Vec<f64>> {
        let start = self.data_start + (e.offset as usize) * 8;
        let end = start + (e.len as usize) * 8;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: entry {:?} needs bytes {start}..{end}, file has {}",
                e.name,
                self.bytes.len()
            )));
        }
        Ok(self.bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn read_vec(&mut self, name: &str) -> Result<Vec<f64>> {
        let e = self.entry(name)?;
        self.read_entry(e)
    }

    fn fill(&mut self, name: &str, t: &mut Tensor) -> Result<()> {
        let e = self.entry(name)?;
        if e.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} has shape {:?}, model expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        let values = self.read_entry(e)?;
        if values.len() != t.numel() {
            return Err(Error::Checkpoint(format!(
                "entry {name:?} length {} does not match shape {:?}",
                values.len(),
                e.shape
            )));
        }
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }
}

fn read_adam(
    reader: &mut Reader<'_>,
    prefix: &str,
    names: &[(String, &Tensor)],
    t: u64,
    hyper: crate::adam::AdamHyper,
) -> Result<AdamSet> {
    let mut states = Vec::with_capacity(names.len());
    for (name, tensor) in names {
        let m = reader.read_vec(&format!("{prefix}.{name}.m"))?;
        let v = reader.read_vec(&format!("{prefix}.{name}.v"))?;
        if m.len() != tensor.numel() || v.len() != tensor.numel() {
            return Err(Error::Checkpoint(format!(
                "adam state {prefix}.{name} sized {} does not match parameter {}",
                m.len(),
                tensor.numel()
            )));
        }
        states.push(AdamState {
            m,
            v,
            t,
            hyper,
        });
    }
    Ok(AdamSet { states })
}
