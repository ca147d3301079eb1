//! Timing and learning probe for the desk-scale experiment configuration.
//! Run: cargo run --example desk_probe -p wordgan-core [iterations] [base_g] [base_d] [embed]

use std::time::Instant;

use wordgan_core::eval::{per_word_report, FeatureExtractor, SsimConfig};
use wordgan_core::nets::generate_sequence;
use wordgan_core::text::{
    dominant_foreground_color, generate_synthetic_dataset, tokenize, SyntheticDatasetConfig,
    WordEmbeddingTable,
};
use wordgan_core::train::{train, BatchAssembler, TrainHooks, TrainingConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let base_g: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let base_d: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let embed: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let k: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cond_ch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.0002);

    let ds_cfg = SyntheticDatasetConfig {
        image_extent: 32,
        ..Default::default()
    };
    let dataset = generate_synthetic_dataset(&ds_cfg).unwrap();
    // hold out one sample per combination (the 5th)
    let train_set: Vec<_> = dataset
        .iter()
        .filter(|r| !r.id.ends_with('4'))
        .cloned()
        .collect();
    let held_out: Vec<_> = dataset
        .iter()
        .filter(|r| r.id.ends_with('4'))
        .cloned()
        .collect();
    println!("train {} held-out {}", train_set.len(), held_out.len());

    let ipe = train_set.len().div_ceil(16);
    let epochs = iters.div_ceil(ipe);
    let cfg = TrainingConfig {
        batch_size: 16,
        epochs,
        disc_steps: k,
        learning_rate: lr,
        image_extent: 32,
        hidden_dim: 64,
        embedding_dim: embed,
        condition_dim: embed,
        base_channels_g: base_g,
        base_channels_d: base_d,
        cond_channels: cond_ch,
        seed: 7,
        checkpoint_interval: 100000,
        ..Default::default()
    };
    println!("cfg: g{base_g} d{base_d} e{embed} k{k} cond{cond_ch} lr{lr}");
    let table = WordEmbeddingTable::new(embed, cfg.seed).unwrap();
    let assembler = BatchAssembler::mean_pool(&table);

    let t0 = Instant::now();
    let mut last_print = Instant::now();
    let mut progress = |epoch: usize, d: f64, g: f64| {
        if last_print.elapsed().as_secs() >= 10 {
            println!(
                "  epoch {epoch} ({:.1}s): d {d:.4} g {g:.4}",
                t0.elapsed().as_secs_f64()
            );
            last_print = Instant::now();
        }
    };
    let hooks = TrainHooks {
        checkpoint_dir: None,
        loss_log_path: None,
        on_epoch: Some(&mut progress),
    };
    let out = train(&train_set, &cfg, &assembler, None, hooks).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    println!(
        "{} iterations in {:.1}s ({:.3}s/iter) -> 2004 iters ~ {:.1} min",
        out.logs.len(),
        secs,
        secs / out.logs.len() as f64,
        secs / out.logs.len() as f64 * 2004.0 / 60.0
    );
    let tail: Vec<f64> = out
        .logs
        .iter()
        .rev()
        .take(50)
        .map(|l| l.g_objective)
        .collect();
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let tail_below = tail
        .iter()
        .filter(|&&g| g < out.logs[0].g_objective)
        .count();
    println!(
        "g_obj first {:.4} last {:.4} tail50-mean {:.4} tail50-below-first {}/50 | d_obj first {:.4} last {:.4}",
        out.logs.first().unwrap().g_objective,
        out.logs.last().unwrap().g_objective,
        tail_mean,
        tail_below,
        out.logs.first().unwrap().d_objective,
        out.logs.last().unwrap().d_objective,
    );

    // quality probes
    let extractor = FeatureExtractor::from_discriminator(&out.models.disc);
    let report = per_word_report(
        &out.models.lstm,
        &out.models.gen,
        &table,
        &extractor,
        &held_out,
        20,
        &SsimConfig::default(),
        99,
    )
    .unwrap();
    let n = report.max_word_index();
    println!(
        "ssim word1 {:.4} word{n} {:.4}",
        report.mean_ssim_at(1).unwrap(),
        report.mean_ssim_at(n).unwrap()
    );

    let mut hits = 0;
    let mut total = 0;
    for (i, rec) in held_out.iter().take(20).enumerate() {
        let caption = &rec.captions[0];
        let imgs = generate_sequence(&out.models.lstm, &out.models.gen, &table, caption).unwrap();
        let img = imgs.last().unwrap();
        let named: Vec<String> = tokenize(caption)
            .into_iter()
            .filter(|t| ds_cfg.colors.iter().any(|c| &c.name == t))
            .collect();
        let dominant = dominant_foreground_color(img, &ds_cfg.colors);
        total += 1;
        if dominant.as_deref() == Some(named[0].as_str()) {
            hits += 1;
        }
        if i < 4 {
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "  [{i}] {caption:?} -> dominant {dominant:?} range [{lo:.2},{hi:.2}]"
            );
            let strip = wordgan_core::imageio::horizontal_strip(&imgs).unwrap();
            let path = std::path::PathBuf::from(format!("/tmp/probe_strip_{i}.png"));
            wordgan_core::imageio::save_png(&path, &strip).unwrap();
        }
    }
    println!("color fidelity {hits}/{total}");
}
