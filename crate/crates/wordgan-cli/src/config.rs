//! Run configuration: defaults, a plain-text `key = value` config file, and
//! command-line `key=value` overrides (highest precedence). Unknown keys are
//! rejected and every field is validated before any work starts.

use std::path::{Path, PathBuf};

use wordgan_core::error::{Error, Result};
use wordgan_core::text::{default_palette, ColorSpec, ShapeKind, SizeKind};
use wordgan_core::train::TrainingConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub training: TrainingConfig,
    /// Synthetic dataset composition.
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorSpec>,
    pub sizes: Vec<SizeKind>,
    pub samples_per_combination: usize,
    /// Paths.
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub embeddings_path: Option<PathBuf>,
    pub conditions_path: Option<PathBuf>,
    /// Explicit checkpoint file for generate/eval/inspect; defaults to the
    /// newest checkpoint under `checkpoint_dir`.
    pub checkpoint: Option<PathBuf>,
    /// Sentence for `generate`.
    pub text: Option<String>,
    /// Sample size for `eval`.
    pub sentences: usize,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            training: TrainingConfig::default(),
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            colors: default_palette(),
            sizes: vec![SizeKind::Small, SizeKind::Large],
            samples_per_combination: 5,
            dataset_dir: PathBuf::from("data/shapes"),
            checkpoint_dir: PathBuf::from("runs"),
            output_dir: PathBuf::from("out"),
            embeddings_path: None,
            conditions_path: None,
            checkpoint: None,
            text: None,
            sentences: 20,
            resume: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::arg(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::arg(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_shapes(value: &str) -> Result<Vec<ShapeKind>> {
    value
        .split(',')
        .map(|s| match s.trim() {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(Error::arg(format!("shapes: unknown shape {other:?}"))),
        })
        .collect()
}

fn parse_sizes(value: &str) -> Result<Vec<SizeKind>> {
    value
        .split(',')
        .map(|s| match s.trim() {
            "small" => Ok(SizeKind::Small),
            "large" => Ok(SizeKind::Large),
            other => Err(Error::arg(format!("sizes: unknown size {other:?}"))),
        })
        .collect()
}

/// `red,green` picks built-in colors; `name:R:G:B` defines one from 8-bit
/// channel values.
fn parse_colors(value: &str) -> Result<Vec<ColorSpec>> {
    let builtin = default_palette();
    value
        .split(',')
        .map(|entry| {
            let entry = entry.trim();
            if let Some(c) = builtin.iter().find(|c| c.name == entry) {
                return Ok(c.clone());
            }
            let parts: Vec<&str> = entry.split(':').collect();
            if parts.len() == 4 {
                let mut rgb = [0.0; 3];
                for (slot, txt) in rgb.iter_mut().zip(&parts[1..]) {
                    let v: u8 = txt
                        .trim()
                        .parse()
                        .map_err(|_| Error::arg(format!("colors: bad channel {txt:?}")))?;
                    *slot = f64::from(v) / 127.5 - 1.0;
                }
                Ok(ColorSpec {
                    name: parts[0].trim().to_string(),
                    rgb,
                })
            } else {
                Err(Error::arg(format!(
                    "colors: {entry:?} is neither a built-in color nor name:R:G:B"
                )))
            }
        })
        .collect()
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.training;
        match key {
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "beta1" => t.beta1 = parse_num(key, value)?,
            "beta2" => t.beta2 = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "disc_steps" => t.disc_steps = parse_num(key, value)?,
            "image_extent" => t.image_extent = parse_num(key, value)?,
            "hidden_dim" => t.hidden_dim = parse_num(key, value)?,
            "embedding_dim" => {
                t.embedding_dim = parse_num(key, value)?;
                // mean pooling keeps the condition the same length
                if self.conditions_path.is_none() {
                    t.condition_dim = t.embedding_dim;
                }
            }
            "condition_dim" => t.condition_dim = parse_num(key, value)?,
            "channels" => t.channels = parse_num(key, value)?,
            "base_channels_g" => t.base_channels_g = parse_num(key, value)?,
            "base_channels_d" => t.base_channels_d = parse_num(key, value)?,
            "cond_channels" => t.cond_channels = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse_num(key, value)?,
            "shapes" => self.shapes = parse_shapes(value)?,
            "colors" => self.colors = parse_colors(value)?,
            "sizes" => self.sizes = parse_sizes(value)?,
            "samples_per_combination" => self.samples_per_combination = parse_num(key, value)?,
            "dataset_dir" => self.dataset_dir = PathBuf::from(value.trim()),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value.trim()),
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "embeddings_path" => self.embeddings_path = Some(PathBuf::from(value.trim())),
            "conditions_path" => self.conditions_path = Some(PathBuf::from(value.trim())),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value.trim())),
            "text" => self.text = Some(value.to_string()),
            "sentences" => self.sentences = parse_num(key, value)?,
            "resume" => self.resume = parse_bool(key, value)?,
            other => return Err(Error::arg(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a config file: `key = value` lines, `#` comments, blank lines
    /// ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let content = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `KEY=VALUE` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                Error::arg(format!("override {item:?} is not of the form KEY=VALUE"))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Full validation; collects every problem before reporting.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.training.validate() {
            problems.push(e.to_string());
        }
        if self.shapes.is_empty() {
            problems.push("shapes list is empty".to_string());
        }
        if self.colors.is_empty() {
            problems.push("colors list is empty".to_string());
        }
        if self.sizes.is_empty() {
            problems.push("sizes list is empty".to_string());
        }
        if self.samples_per_combination == 0 {
            problems.push("samples_per_combination must be >= 1".to_string());
        }
        if self.sentences == 0 {
            problems.push("sentences must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::arg(problems.join("; ")))
        }
    }

    /// Defaults, then file, then overrides, then an explicit seed flag.
    pub fn assemble(
        config_file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = config_file {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(overrides)?;
        if let Some(s) = seed {
            cfg.training.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
