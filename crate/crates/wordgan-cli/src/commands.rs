//! The five subcommands. Every command validates its inputs up front,
//! writes files atomically, and is deterministic given the configured seed.

use std::path::{Path, PathBuf};

use wordgan_core::checkpoint::{self, Checkpoint};
use wordgan_core::error::{Error, Result};
use wordgan_core::eval::{per_word_report, FeatureExtractor, SsimConfig};
use wordgan_core::nets::generate_sequence;
use wordgan_core::text::{
    generate_synthetic_dataset, load_image_caption_dir, load_word_vectors, tokenize,
    write_dataset_dir, PrecomputedConditions, SyntheticDatasetConfig, WordEmbeddingTable,
};
use wordgan_core::train::{train, BatchAssembler, TrainHooks};
use wordgan_core::{fsio, imageio};

use crate::config::RunConfig;

/// Renders the synthetic dataset into `dataset_dir`.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<()> {
    let ds_cfg = SyntheticDatasetConfig {
        shapes: cfg.shapes.clone(),
        colors: cfg.colors.clone(),
        sizes: cfg.sizes.clone(),
        image_extent: cfg.training.image_extent,
        samples_per_combination: cfg.samples_per_combination,
        seed: cfg.training.seed,
    };
    let records = generate_synthetic_dataset(&ds_cfg)?;
    write_dataset_dir(&records, &ds_cfg.colors, ds_cfg.seed, &cfg.dataset_dir)?;
    println!(
        "wrote {} image/caption pairs to {}",
        records.len(),
        cfg.dataset_dir.display()
    );
    Ok(())
}

fn build_table(cfg: &RunConfig) -> Result<WordEmbeddingTable> {
    match &cfg.embeddings_path {
        Some(path) => {
            let table = load_word_vectors(path)?;
            if table.dimension() != cfg.training.embedding_dim {
                return Err(Error::arg(format!(
                    "embedding file dimension {} does not match embedding_dim {}",
                    table.dimension(),
                    cfg.training.embedding_dim
                )));
            }
            Ok(table)
        }
        None => WordEmbeddingTable::new(cfg.training.embedding_dim, cfg.training.seed),
    }
}

/// Newest checkpoint in a directory (zero-padded iteration in the name makes
/// lexicographic order numeric).
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<PathBuf> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))
    })? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("lcgan")
            && best.as_ref().map(|b| path > *b).unwrap_or(true)
        {
            best = Some(path);
        }
    }
    best.ok_or_else(|| Error::arg(format!("no checkpoint found under {}", dir.display())))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.checkpoint {
        Some(path) => Ok(path.clone()),
        None => latest_checkpoint(&cfg.checkpoint_dir),
    }
}

/// Trains on the dataset directory, writing checkpoints and the loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dataset = load_image_caption_dir(&cfg.dataset_dir, cfg.training.image_extent)?;
    let table = build_table(cfg)?;
    let conditions = match &cfg.conditions_path {
        Some(path) => {
            let conds = PrecomputedConditions::load(path)?;
            if conds.dimension() != cfg.training.condition_dim {
                return Err(Error::arg(format!(
                    "condition file dimension {} does not match condition_dim {}",
                    conds.dimension(),
                    cfg.training.condition_dim
                )));
            }
            Some(conds)
        }
        None => None,
    };
    let assembler = BatchAssembler {
        table: &table,
        conditions: conditions.as_ref(),
    };

    let resume = if cfg.resume {
        let path = latest_checkpoint(&cfg.checkpoint_dir)?;
        let ck = Checkpoint::load(&path)?;
        println!("resuming from {} (iteration {})", path.display(), ck.iteration);
        Some(ck)
    } else {
        None
    };

    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let loss_log = cfg.checkpoint_dir.join("loss_log.csv");
    let epochs = cfg.training.epochs;
    let mut progress = |epoch: usize, d: f64, g: f64| {
        println!("epoch {}/{epochs}  d_obj {d:.4}  g_obj {g:.4}", epoch + 1);
    };
    let hooks = TrainHooks {
        checkpoint_dir: Some(&cfg.checkpoint_dir),
        loss_log_path: Some(&loss_log),
        on_epoch: Some(&mut progress),
    };
    let outcome = train(&dataset, &cfg.training, &assembler, resume, hooks)?;
    println!(
        "finished at iteration {}; checkpoints in {}",
        outcome.iteration,
        cfg.checkpoint_dir.display()
    );
    Ok(())
}

/// Generates one PNG per word plus a horizontal strip and a caption sidecar.
pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let text = cfg
        .text
        .as_deref()
        .ok_or_else(|| Error::arg("generate needs text=... (the description)".to_string()))?;
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::arg(format!("text {text:?} contains no words")));
    }
    let ck = Checkpoint::load(&checkpoint_path(cfg)?)?;
    let images = generate_sequence(&ck.models.lstm, &ck.models.gen, &ck.table, text)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    for (t, (img, token)) in images.iter().zip(&tokens).enumerate() {
        let path = cfg.output_dir.join(format!("word_{:02}_{}.png", t + 1, token));
        imageio::save_png(&path, img)?;
    }
    let strip = imageio::horizontal_strip(&images)?;
    imageio::save_png(&cfg.output_dir.join("strip.png"), &strip)?;
    fsio::atomic_write(
        &cfg.output_dir.join("caption.txt"),
        format!("{text}\n").as_bytes(),
    )?;
    println!(
        "wrote {} word images and strip.png to {}",
        images.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

/// Scores generated per-word sequences against real images and writes the
/// report CSV.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint::load(&checkpoint_path(cfg)?)?;
    let dataset = load_image_caption_dir(&cfg.dataset_dir, ck.config.image_extent)?;
    let extractor = FeatureExtractor::from_discriminator(&ck.models.disc);
    let report = per_word_report(
        &ck.models.lstm,
        &ck.models.gen,
        &ck.table,
        &extractor,
        &dataset,
        cfg.sentences,
        &SsimConfig::default(),
        cfg.training.seed,
    )?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join("report.csv");
    fsio::atomic_write(&path, report.to_csv().as_bytes())?;
    let means: Vec<String> = report
        .aggregates
        .iter()
        .map(|r| format!("{:.4}", r.ssim))
        .collect();
    println!("mean ssim per word index: {}", means.join(" "));
    println!("wrote {}", path.display());
    Ok(())
}

/// Prints the manifest of a checkpoint.
pub fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    let path = checkpoint_path(cfg)?;
    let manifest = checkpoint::manifest_json(&path)?;
    let tensors = manifest["tensors"].as_array().map(|a| a.len()).unwrap_or(0);
    println!("checkpoint: {}", path.display());
    println!("iteration:  {}", manifest["iteration"]);
    println!("precision:  {}", manifest["precision"]);
    println!("tensors:    {tensors}");
    println!(
        "config:     {}",
        serde_json::to_string_pretty(&manifest["config"])
            .map_err(|e| Error::Parse(e.to_string()))?
    );
    Ok(())
}
