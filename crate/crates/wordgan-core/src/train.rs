//! Alternating minimax training: per iteration, `disc_steps` discriminator
//! ascent steps on the three-term objective, then one joint descent step for
//! the generator and the LSTM. Fake images are regenerated inside every
//! discriminator step and treated as constants there; gradient never crosses
//! between the two players.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamHyper, AdamSet, Direction};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lstm::{init_lstm, lstm_unroll, LstmParams};
use crate::nets::{
    discriminator_forward, discriminator_objective, generator_forward, generator_objective,
    init_discriminator_with, init_generator, DiscriminatorParams, GeneratorParams, NetMode,
};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, TensorId};
use crate::text::{
    tokenize, CaptionedImage, PrecomputedConditions, SentenceCondition, WordEmbeddingTable,
};

/// Hyperparameters and model dimensions for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discriminator steps per iteration (k).
    pub disc_steps: usize,
    pub image_extent: usize,
    /// LSTM hidden size Z (the generator input width).
    pub hidden_dim: usize,
    /// Word-embedding size E.
    pub embedding_dim: usize,
    /// Condition length T; equals `embedding_dim` under mean pooling.
    pub condition_dim: usize,
    pub channels: usize,
    pub base_channels_g: usize,
    pub base_channels_d: usize,
    pub cond_channels: usize,
    pub seed: u64,
    /// Epochs between checkpoint snapshots.
    pub checkpoint_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            epochs: 600,
            disc_steps: 2,
            image_extent: 64,
            hidden_dim: 128,
            embedding_dim: 64,
            condition_dim: 64,
            channels: 3,
            base_channels_g: 64,
            base_channels_d: 64,
            cond_channels: 16,
            seed: 0,
            checkpoint_interval: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::arg("beta1 and beta2 must lie in (0,1)".to_string()));
        }
        if self.batch_size < 2 {
            return Err(Error::arg(format!(
                "batch_size must be >= 2 (batch norm needs it), got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.disc_steps == 0 || self.checkpoint_interval == 0 {
            return Err(Error::arg(
                "epochs, disc_steps, and checkpoint_interval must be >= 1".to_string(),
            ));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
            ("condition_dim", self.condition_dim),
            ("channels", self.channels),
            ("base_channels_g", self.base_channels_g),
            ("base_channels_d", self.base_channels_d),
            ("cond_channels", self.cond_channels),
        ] {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be positive")));
            }
        }
        if !(self.image_extent >= 8
            && self.image_extent.is_multiple_of(4)
            && (self.image_extent / 4).is_power_of_two())
        {
            return Err(Error::arg(format!(
                "image_extent must be 4 * 2^k with k >= 1, got {}",
                self.image_extent
            )));
        }
        Ok(())
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper::new(self.learning_rate, self.beta1, self.beta2)
    }
}

/// The three trainable parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub lstm: LstmParams,
    pub gen: GeneratorParams,
    pub disc: DiscriminatorParams,
}

impl Models {
    pub fn init(cfg: &TrainingConfig) -> Result<Models> {
        cfg.validate()?;
        let init_scale = 1.0 / (cfg.hidden_dim as f64).sqrt();
        Ok(Models {
            lstm: init_lstm(cfg.embedding_dim, cfg.hidden_dim, cfg.seed, init_scale)?,
            gen: init_generator(
                cfg.hidden_dim,
                cfg.image_extent,
                cfg.channels,
                cfg.base_channels_g,
                cfg.seed,
            )?,
            disc: init_discriminator_with(
                cfg.image_extent,
                cfg.channels,
                cfg.base_channels_d,
                cfg.condition_dim,
                cfg.cond_channels,
                cfg.seed,
            )?,
        })
    }
}

/// Adam moment buffers for all three parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamStates {
    pub disc: AdamSet,
    pub gen: AdamSet,
    pub lstm: AdamSet,
}

impl AdamStates {
    pub fn init(models: &Models, hyper: AdamHyper) -> AdamStates {
        AdamStates {
            disc: AdamSet::for_params(models.disc.trainable().iter().map(|(_, t)| *t), hyper),
            gen: AdamSet::for_params(models.gen.trainable().iter().map(|(_, t)| *t), hyper),
            lstm: AdamSet::for_params(models.lstm.trainable().iter().map(|(_, t)| *t), hyper),
        }
    }
}

/// One sampled training record: matched real image, its caption tokens and
/// condition, and a mismatched real image from a different class.
#[derive(Clone, Debug)]
pub struct BatchRecord {
    pub real: Tensor,
    pub tokens: Vec<String>,
    pub word_vectors: Vec<Tensor>,
    pub condition: Tensor,
    pub mismatch: Tensor,
    pub real_class: u32,
    pub mismatch_class: u32,
    pub caption: String,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub records: Vec<BatchRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Where word vectors and sentence conditions come from.
#[derive(Clone, Copy)]
pub struct BatchAssembler<'a> {
    pub table: &'a WordEmbeddingTable,
    /// Precomputed conditions keyed by `"<record_id>:<caption_index>"`; mean
    /// pooling over the word vectors otherwise.
    pub conditions: Option<&'a PrecomputedConditions>,
}

impl<'a> BatchAssembler<'a> {
    pub fn mean_pool(table: &'a WordEmbeddingTable) -> BatchAssembler<'a> {
        BatchAssembler {
            table,
            conditions: None,
        }
    }

    fn condition_for(
        &self,
        record: &CaptionedImage,
        caption_index: usize,
        tokens: &[String],
    ) -> Result<SentenceCondition> {
        match self.conditions {
            Some(conds) => conds.get(&format!("{}:{caption_index}", record.id)),
            None => crate::text::sentence_condition_mean(self.table, tokens),
        }
    }
}

fn class_census(dataset: &[CaptionedImage]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".to_string()));
    }
    let first = dataset[0].class_id;
    if dataset.iter().all(|r| r.class_id == first) {
        return Err(Error::Dataset(
            "dataset has a single class; mismatch sampling is impossible".to_string(),
        ));
    }
    Ok(())
}

/// Builds a batch from explicit record indices: a uniformly chosen caption
/// per record and a uniformly chosen mismatch image from a different class.
pub fn assemble_batch(
    dataset: &[CaptionedImage],
    indices: &[usize],
    rng: &mut ChaCha20Rng,
    assembler: &BatchAssembler<'_>,
) -> Result<Batch> {
    class_census(dataset)?;
    let mut records = Vec::with_capacity(indices.len());
    for &idx in indices {
        let rec = dataset
            .get(idx)
            .ok_or_else(|| Error::arg(format!("record index {idx} out of range")))?;
        let caption_index = rng.random_range(0..rec.captions.len());
        let caption = rec.captions[caption_index].clone();
        let tokens = tokenize(&caption);
        if tokens.is_empty() {
            return Err(Error::Dataset(format!(
                "record {:?} caption {caption:?} has no words",
                rec.id
            )));
        }
        let word_vectors = crate::text::embed_words(assembler.table, &tokens)?;
        let condition = assembler
            .condition_for(rec, caption_index, &tokens)?
            .vector;

        // mismatch: uniform over records whose class differs
        let candidates = dataset
            .iter()
            .filter(|r| r.class_id != rec.class_id)
            .count();
        let mut pick = rng.random_range(0..candidates);
        let mm = dataset
            .iter()
            .find(|r| {
                if r.class_id == rec.class_id {
                    false
                } else if pick == 0 {
                    true
                } else {
                    pick -= 1;
                    false
                }
            })
            .expect("candidate count was positive");

        records.push(BatchRecord {
            real: rec.image.clone(),
            tokens,
            word_vectors,
            condition,
            mismatch: mm.image.clone(),
            real_class: rec.class_id,
            mismatch_class: mm.class_id,
            caption,
        });
    }
    Ok(Batch { records })
}

/// Uniform-with-replacement sampling of `m` records.
pub fn sample_batch(
    dataset: &[CaptionedImage],
    m: usize,
    rng: &mut ChaCha20Rng,
    assembler: &BatchAssembler<'_>,
) -> Result<Batch> {
    if m == 0 {
        return Err(Error::arg("batch size must be >= 1".to_string()));
    }
    class_census(dataset)?;
    let indices: Vec<usize> = (0..m).map(|_| rng.random_range(0..dataset.len())).collect();
    assemble_batch(dataset, &indices, rng, assembler)
}

// ── Forward helpers ─────────────────────────────────────────────────────

fn stack_tensors(tape: &mut Tape, items: &[&Tensor]) -> Result<TensorId> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "cannot stack {:?} with {:?}",
                t.shape(),
                shape
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut out_shape = vec![items.len()];
    out_shape.extend_from_slice(&shape);
    tape.new_tensor(out_shape, data, false)
}

/// Record indices grouped by caption length, longest first; groups keep the
/// batch order within themselves.
fn group_by_length(batch: &Batch) -> Vec<(usize, Vec<usize>)> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, rec) in batch.records.iter().enumerate() {
        let n = rec.word_vectors.len();
        match groups.iter_mut().find(|(len, _)| *len == n) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((n, vec![i])),
        }
    }
    groups.sort_by_key(|(len, _)| usize::MAX - *len);
    groups
}

struct GroupForward {
    indices: Vec<usize>,
    d_fakes: Vec<TensorId>,
}

/// LSTM + generator + discriminator forward for every word of one length
/// group. `g_mode`/`d_mode` pick whose batch-norm stats are committed.
#[allow(clippy::too_many_arguments)]
fn forward_group_fakes(
    tape: &mut Tape,
    models: &Models,
    lstm_binding: &crate::lstm::LstmBinding,
    gen_binding: &crate::nets::GeneratorBinding,
    disc_binding: &crate::nets::DiscriminatorBinding,
    batch: &Batch,
    indices: &[usize],
    n_words: usize,
    g_mode: NetMode,
    d_mode: NetMode,
) -> Result<Vec<TensorId>> {
    let xs: Vec<TensorId> = (0..n_words)
        .map(|t| {
            let vecs: Vec<&Tensor> = indices
                .iter()
                .map(|&i| &batch.records[i].word_vectors[t])
                .collect();
            stack_tensors(tape, &vecs)
        })
        .collect::<Result<_>>()?;
    let hs = lstm_unroll(tape, lstm_binding, &xs)?;

    let conds: Vec<&Tensor> = indices.iter().map(|&i| &batch.records[i].condition).collect();
    let y = stack_tensors(tape, &conds)?;

    let mut d_fakes = Vec::with_capacity(n_words);
    for h in hs {
        let fake = generator_forward(tape, &models.gen, gen_binding, h, g_mode)?;
        let d = discriminator_forward(tape, &models.disc, disc_binding, fake, y, d_mode)?;
        d_fakes.push(d);
    }
    Ok(d_fakes)
}

fn batch_images_and_conditions(
    tape: &mut Tape,
    batch: &Batch,
) -> Result<(TensorId, TensorId, TensorId)> {
    let reals: Vec<&Tensor> = batch.records.iter().map(|r| &r.real).collect();
    let mms: Vec<&Tensor> = batch.records.iter().map(|r| &r.mismatch).collect();
    let conds: Vec<&Tensor> = batch.records.iter().map(|r| &r.condition).collect();
    Ok((
        stack_tensors(tape, &reals)?,
        stack_tensors(tape, &mms)?,
        stack_tensors(tape, &conds)?,
    ))
}

/// Assembles the discriminator objective for possibly mixed-length batches:
/// real and mismatch terms over the full batch, fake terms per length group
/// weighted by group size.
fn disc_objective_grouped(
    tape: &mut Tape,
    d_real: TensorId,
    groups: &[GroupForward],
    d_mismatch: TensorId,
    batch_len: usize,
) -> Result<TensorId> {
    if groups.len() == 1 && groups[0].indices.len() == batch_len {
        return discriminator_objective(tape, d_real, &groups[0].d_fakes, d_mismatch);
    }
    let real_log = crate::nets::clamped_log(tape, d_real, false)?;
    let mut total = tape.mean_all(real_log)?;
    for g in groups {
        let gobj = generator_objective(tape, &g.d_fakes)?;
        let scaled = tape.scale(gobj, g.indices.len() as f64 / batch_len as f64)?;
        total = tape.add(total, scaled)?;
    }
    let mm_log = crate::nets::clamped_log(tape, d_mismatch, true)?;
    let mm_mean = tape.mean_all(mm_log)?;
    tape.add(total, mm_mean)
}

fn gen_objective_grouped(
    tape: &mut Tape,
    groups: &[GroupForward],
    batch_len: usize,
) -> Result<TensorId> {
    if groups.len() == 1 && groups[0].indices.len() == batch_len {
        return generator_objective(tape, &groups[0].d_fakes);
    }
    let mut total: Option<TensorId> = None;
    for g in groups {
        let gobj = generator_objective(tape, &g.d_fakes)?;
        let scaled = tape.scale(gobj, g.indices.len() as f64 / batch_len as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(total.unwrap())
}

fn apply_adam_group(
    grads: &Gradients,
    ids: &[TensorId],
    mut params: Vec<(String, &mut Tensor)>,
    set: &mut AdamSet,
    direction: Direction,
) -> Result<()> {
    debug_assert_eq!(ids.len(), params.len());
    debug_assert_eq!(ids.len(), set.states.len());
    for ((id, (_, tensor)), state) in ids
        .iter()
        .zip(params.iter_mut())
        .zip(set.states.iter_mut())
    {
        let grad = grads.dense(*id, tensor.shape());
        adam_step(tensor, &grad, state, direction)?;
    }
    Ok(())
}

// ── The two update steps ────────────────────────────────────────────────

/// One discriminator ascent step. Fake images are regenerated from the
/// current LSTM/generator but bound untracked, so no gradient reaches them
/// and both stay bit-identical. Returns the objective value before the
/// update.
pub fn discriminator_update(
    models: &mut Models,
    batch: &Batch,
    adam_d: &mut AdamSet,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::arg(
            "discriminator_update needs a batch of >= 2 (batch norm)".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let lstm_binding = models.lstm.bind(&mut tape, false)?;
    let gen_binding = models.gen.bind(&mut tape, false);
    let disc_binding = models.disc.bind(&mut tape, true);

    let (real, mismatch, y_all) = batch_images_and_conditions(&mut tape, batch)?;
    let d_real = discriminator_forward(
        &mut tape,
        &models.disc,
        &disc_binding,
        real,
        y_all,
        NetMode::TrainCommit,
    )?;
    let d_mm = discriminator_forward(
        &mut tape,
        &models.disc,
        &disc_binding,
        mismatch,
        y_all,
        NetMode::TrainCommit,
    )?;

    let mut groups = Vec::new();
    for (n_words, indices) in group_by_length(batch) {
        let d_fakes = forward_group_fakes(
            &mut tape,
            models,
            &lstm_binding,
            &gen_binding,
            &disc_binding,
            batch,
            &indices,
            n_words,
            NetMode::TrainFrozen,
            NetMode::TrainCommit,
        )?;
        groups.push(GroupForward { indices, d_fakes });
    }

    let objective = disc_objective_grouped(&mut tape, d_real, &groups, d_mm, batch.len())?;
    let value = tape.value(objective)[0];
    let grads = tape.backward(objective)?;
    apply_adam_group(
        &grads,
        &disc_binding.param_ids(),
        models.disc.trainable_mut(),
        adam_d,
        Direction::Ascend,
    )?;
    Ok(value)
}

/// One joint generator + LSTM descent step; the discriminator is bound
/// untracked and its running stats stay frozen. Returns the objective value
/// before the update.
pub fn generator_lstm_update(
    models: &mut Models,
    batch: &Batch,
    adam_g: &mut AdamSet,
    adam_l: &mut AdamSet,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::arg(
            "generator_lstm_update needs a batch of >= 2 (batch norm)".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let lstm_binding = models.lstm.bind(&mut tape, true)?;
    let gen_binding = models.gen.bind(&mut tape, true);
    let disc_binding = models.disc.bind(&mut tape, false);

    let mut groups = Vec::new();
    for (n_words, indices) in group_by_length(batch) {
        let d_fakes = forward_group_fakes(
            &mut tape,
            models,
            &lstm_binding,
            &gen_binding,
            &disc_binding,
            batch,
            &indices,
            n_words,
            NetMode::TrainCommit,
            NetMode::TrainFrozen,
        )?;
        groups.push(GroupForward { indices, d_fakes });
    }

    let objective = gen_objective_grouped(&mut tape, &groups, batch.len())?;
    let value = tape.value(objective)[0];
    let grads = tape.backward(objective)?;
    apply_adam_group(
        &grads,
        &gen_binding.param_ids(),
        models.gen.trainable_mut(),
        adam_g,
        Direction::Descend,
    )?;
    apply_adam_group(
        &grads,
        lstm_binding.param_ids(),
        models.lstm.trainable_mut(),
        adam_l,
        Direction::Descend,
    )?;
    Ok(value)
}

/// Both objectives evaluated as pure functions of the parameters on a fixed
/// batch (no tracking, no running-stat commits).
pub fn evaluate_objectives(models: &Models, batch: &Batch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let lstm_binding = models.lstm.bind(&mut tape, false)?;
    let gen_binding = models.gen.bind(&mut tape, false);
    let disc_binding = models.disc.bind(&mut tape, false);

    let (real, mismatch, y_all) = batch_images_and_conditions(&mut tape, batch)?;
    let d_real = discriminator_forward(
        &mut tape,
        &models.disc,
        &disc_binding,
        real,
        y_all,
        NetMode::TrainFrozen,
    )?;
    let d_mm = discriminator_forward(
        &mut tape,
        &models.disc,
        &disc_binding,
        mismatch,
        y_all,
        NetMode::TrainFrozen,
    )?;
    let mut groups = Vec::new();
    for (n_words, indices) in group_by_length(batch) {
        let d_fakes = forward_group_fakes(
            &mut tape,
            models,
            &lstm_binding,
            &gen_binding,
            &disc_binding,
            batch,
            &indices,
            n_words,
            NetMode::TrainFrozen,
            NetMode::TrainFrozen,
        )?;
        groups.push(GroupForward { indices, d_fakes });
    }
    let d_obj = disc_objective_grouped(&mut tape, d_real, &groups, d_mm, batch.len())?;
    let g_obj = gen_objective_grouped(&mut tape, &groups, batch.len())?;
    Ok((tape.value(d_obj)[0], tape.value(g_obj)[0]))
}

// ── Training loop ───────────────────────────────────────────────────────

/// One loss-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub epoch: usize,
    pub d_objective: f64,
    pub g_objective: f64,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub models: Models,
    pub adam: AdamStates,
    pub iteration: u64,
    pub logs: Vec<IterationLog>,
}

/// Optional side effects of the training loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Directory for periodic and final checkpoints.
    pub checkpoint_dir: Option<&'a Path>,
    /// Append-only CSV `iter,epoch,d_obj,g_obj,seconds`.
    pub loss_log_path: Option<&'a Path>,
    /// Called once per finished epoch with (epoch, d_obj, g_obj).
    pub on_epoch: Option<&'a mut dyn FnMut(usize, f64, f64)>,
}

pub fn iterations_per_epoch(dataset_len: usize, batch_size: usize) -> usize {
    dataset_len.div_ceil(batch_size)
}

/// Runs the full loop: for every iteration k discriminator steps then one
/// generator+LSTM step, with per-epoch shuffling (the final short chunk
/// wraps around the shuffled order so every batch holds exactly `m`
/// records). Deterministic given the seed: every stochastic choice is keyed
/// by (seed, epoch) or (seed, iteration), so resuming from a checkpoint
/// continues the exact trajectory.
pub fn train(
    dataset: &[CaptionedImage],
    config: &TrainingConfig,
    assembler: &BatchAssembler<'_>,
    resume: Option<checkpoint::Checkpoint>,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    class_census(dataset)?;
    if assembler.table.dimension() != config.embedding_dim {
        return Err(Error::arg(format!(
            "embedding table dimension {} does not match config embedding_dim {}",
            assembler.table.dimension(),
            config.embedding_dim
        )));
    }
    if assembler.conditions.is_none() && config.condition_dim != config.embedding_dim {
        return Err(Error::arg(format!(
            "mean pooling requires condition_dim == embedding_dim, got {} vs {}",
            config.condition_dim, config.embedding_dim
        )));
    }

    let (mut models, mut adam, start_iter) = match resume {
        Some(ck) => {
            ck.check_structural_match(config)?;
            (ck.models, ck.adam, ck.iteration)
        }
        None => {
            let models = Models::init(config)?;
            let adam = AdamStates::init(&models, config.adam_hyper());
            (models, adam, 0)
        }
    };

    let ipe = iterations_per_epoch(dataset.len(), config.batch_size) as u64;
    let total = config.epochs as u64 * ipe;
    if start_iter > total {
        return Err(Error::arg(format!(
            "checkpoint is at iteration {start_iter}, beyond the configured {total}"
        )));
    }

    let mut log_file = match hooks.loss_log_path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            let fresh = !path.exists();
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "iter,epoch,d_obj,g_obj,seconds")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut logs = Vec::new();
    let mut epoch_order: Vec<usize> = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut on_epoch = hooks.on_epoch;

    for iter in start_iter..total {
        let epoch = iter / ipe;
        let pos = (iter % ipe) as usize;
        if epoch != order_epoch {
            epoch_order = (0..dataset.len()).collect();
            let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch);
            epoch_order.shuffle(&mut shuffle_rng);
            order_epoch = epoch;
        }
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|j| epoch_order[(pos * config.batch_size + j) % epoch_order.len()])
            .collect();
        let mut batch_rng = rng::stream(config.seed, "batch", iter);
        let batch = assemble_batch(dataset, &indices, &mut batch_rng, assembler)?;

        let started = Instant::now();
        let mut d_obj = 0.0;
        for _ in 0..config.disc_steps {
            d_obj = discriminator_update(&mut models, &batch, &mut adam.disc)?;
        }
        let g_obj = generator_lstm_update(&mut models, &batch, &mut adam.gen, &mut adam.lstm)?;
        if !d_obj.is_finite() || !g_obj.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective diverged at iteration {iter}: d={d_obj} g={g_obj}"
            )));
        }

        let row = IterationLog {
            iteration: iter,
            epoch: epoch as usize,
            d_objective: d_obj,
            g_objective: g_obj,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{:.3}",
                row.iteration, row.epoch, row.d_objective, row.g_objective, row.seconds
            )?;
        }
        logs.push(row);

        let epoch_done = pos as u64 == ipe - 1;
        if epoch_done {
            if let Some(cb) = on_epoch.as_deref_mut() {
                cb(epoch as usize, d_obj, g_obj);
            }
            let finished_epoch = epoch as usize + 1;
            let last = iter + 1 == total;
            if let Some(dir) = hooks.checkpoint_dir {
                if finished_epoch.is_multiple_of(config.checkpoint_interval) || last {
                    let ck = checkpoint::Checkpoint {
                        models: models.clone(),
                        adam: adam.clone(),
                        iteration: iter + 1,
                        config: config.clone(),
                        table: assembler.table.clone(),
                    };
                    ck.save(&dir.join(format!("ckpt-{:09}.lcgan", iter + 1)))?;
                }
            }
        }
    }

    Ok(TrainOutcome {
        models,
        adam,
        iteration: total,
        logs,
    })
}

/// Small fixtures shared by this module's tests and the checkpoint tests.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::text::{generate_synthetic_dataset, SyntheticDatasetConfig};

    pub(crate) fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            batch_size: 4,
            epochs: 1,
            image_extent: 8,
            hidden_dim: 6,
            embedding_dim: 5,
            condition_dim: 5,
            base_channels_g: 4,
            base_channels_d: 4,
            cond_channels: 4,
            seed: 3,
            checkpoint_interval: 1,
            ..Default::default()
        }
    }

    /// 24 one-per-class records shrunk to 8x8 for speed.
    pub(crate) fn tiny_dataset() -> Vec<CaptionedImage> {
        let cfg = SyntheticDatasetConfig {
            image_extent: 16,
            samples_per_combination: 1,
            ..Default::default()
        };
        let mut records = generate_synthetic_dataset(&cfg).unwrap();
        for rec in &mut records {
            let src = rec.image.data();
            let mut out = vec![0.0; 3 * 64];
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        out[c * 64 + y * 8 + x] = src[c * 256 + (y * 2) * 16 + x * 2];
                    }
                }
            }
            rec.image = Tensor::new(vec![3, 8, 8], out).unwrap();
        }
        records
    }

    pub(crate) fn tiny_checkpoint(iteration: u64) -> crate::checkpoint::Checkpoint {
        let cfg = tiny_config();
        let models = Models::init(&cfg).unwrap();
        let mut adam = AdamStates::init(&models, cfg.adam_hyper());
        // make the moments non-trivial so roundtrips exercise real data
        for set in [&mut adam.lstm, &mut adam.gen, &mut adam.disc] {
            for (i, st) in set.states.iter_mut().enumerate() {
                st.t = iteration;
                for (j, v) in st.m.iter_mut().enumerate() {
                    *v = ((i + 1) * (j + 1)) as f64 * 1e-3;
                }
                for (j, v) in st.v.iter_mut().enumerate() {
                    *v = ((i + 2) * (j + 1)) as f64 * 1e-6;
                }
            }
        }
        let mut table = WordEmbeddingTable::new(cfg.embedding_dim, cfg.seed).unwrap();
        table.insert("red", vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        table.insert("blue", vec![-0.1, -0.2, -0.3, -0.4, -0.5]).unwrap();
        crate::checkpoint::Checkpoint {
            models,
            adam,
            iteration,
            config: cfg,
            table,
        }
    }
}
