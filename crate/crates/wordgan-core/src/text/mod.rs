//! Text-side inputs: tokenization, word-embedding lookup, sentence
//! conditions, and captioned-image datasets.

pub mod dataset;
mod embedding;

pub use dataset::{
    default_palette, dominant_foreground_color, generate_synthetic_dataset,
    load_image_caption_dir, load_palette, write_dataset_dir, CaptionedImage, ColorSpec, ShapeKind,
    SizeKind, SyntheticDatasetConfig,
};
pub use embedding::{
    embed_words, load_word_vectors, sentence_condition_mean, PrecomputedConditions,
    SentenceCondition, WordEmbeddingTable,
};

/// Lowercases, strips punctuation, and splits on whitespace, preserving word
/// order. Empty input gives an empty list.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let token: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if token.is_empty() {
                None
            } else {
                Some(token)
            }
        })
        .collect()
}
