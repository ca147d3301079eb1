//! Quantitative evaluation: windowed structural similarity, two-tap
//! convolutional feature distance, and the per-word similarity report over
//! generated image sequences.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::nets::{generate_sequence, DiscBlock, DiscriminatorParams, GeneratorParams, NetMode};
use crate::rng;
use crate::tensor::{Tape, Tensor};
use crate::text::{CaptionedImage, WordEmbeddingTable};

/// Structural-similarity parameters. Images arrive in `[-1,1]` and are
/// mapped to `[0,1]` before windowing, so the dynamic range is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window_extent: usize,
    pub window_stddev: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_extent: 11,
            window_stddev: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_extent == 0 || self.window_extent.is_multiple_of(2) {
            return Err(Error::arg(format!(
                "window extent must be odd, got {}",
                self.window_extent
            )));
        }
        if self.window_stddev <= 0.0
            || self.k1 <= 0.0
            || self.k2 <= 0.0
            || self.dynamic_range <= 0.0
        {
            return Err(Error::arg("ssim constants must be positive".to_string()));
        }
        Ok(())
    }

    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Grayscale `[H,W]` plane in `[0,1]` from a `[C,H,W]` tensor in `[-1,1]`
/// (channel mean), or an `[H,W]` tensor used as-is after range mapping.
fn to_gray01(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    match img.shape() {
        [c, h, w] => {
            let plane = h * w;
            let mut out = vec![0.0; plane];
            for ch in 0..*c {
                for (o, &v) in out.iter_mut().zip(&img.data()[ch * plane..(ch + 1) * plane]) {
                    *o += v;
                }
            }
            let inv = 1.0 / *c as f64;
            for o in out.iter_mut() {
                *o = (*o * inv + 1.0) / 2.0;
            }
            Ok((out, *h, *w))
        }
        [h, w] => {
            let out = img.data().iter().map(|&v| (v + 1.0) / 2.0).collect();
            Ok((out, *h, *w))
        }
        s => Err(Error::shape(format!("ssim expects [C,H,W] or [H,W], got {s:?}"))),
    }
}

fn gaussian_window(extent: usize, sigma: f64) -> Vec<f64> {
    let half = (extent / 2) as f64;
    let mut w = vec![0.0; extent * extent];
    let mut total = 0.0;
    for y in 0..extent {
        for x in 0..extent {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[y * extent + x] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Mean structural similarity over all valid Gaussian windows; the result
/// lies in `[-1,1]` and equals 1 exactly for identical images.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ga, h, w) = to_gray01(a)?;
    let (gb, _, _) = to_gray01(b)?;
    let k = cfg.window_extent;
    if k > h || k > w {
        return Err(Error::arg(format!(
            "ssim window {k} larger than image {h}x{w}"
        )));
    }
    let win = gaussian_window(k, cfg.window_stddev);
    let (c1, c2) = (cfg.c1(), cfg.c2());

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for wy in 0..k {
                let row = (oy + wy) * w + ox;
                let wrow = &win[wy * k..(wy + 1) * k];
                for (wx, &wv) in wrow.iter().enumerate() {
                    let va = ga[row + wx];
                    let vb = gb[row + wx];
                    mu_a += wv * va;
                    mu_b += wv * vb;
                    aa += wv * va * va;
                    bb += wv * vb * vb;
                    ab += wv * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let value = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += value;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(-1.0, 1.0))
}

/// Frozen convolutional stack with an early and a late activation tap.
/// Weights come either from a trained discriminator or from a seeded random
/// initialization; either way the extractor never trains.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    convs: Vec<DiscBlock>,
    image_extent: usize,
    channels: usize,
}

impl FeatureExtractor {
    /// Borrows the convolutional stack (and its running stats) from a
    /// discriminator.
    pub fn from_discriminator(dp: &DiscriminatorParams) -> FeatureExtractor {
        FeatureExtractor {
            convs: dp.convs.clone(),
            image_extent: dp.image_extent,
            channels: dp.channels,
        }
    }

    /// Seeded random frozen extractor, for metric runs independent of any
    /// training state.
    pub fn seeded_random(
        image_extent: usize,
        channels: usize,
        base_channels: usize,
        seed: u64,
    ) -> Result<FeatureExtractor> {
        let dp = crate::nets::init_discriminator_with(image_extent, channels, base_channels, 1, 1, seed)?;
        Ok(FeatureExtractor::from_discriminator(&dp))
    }

    /// Early-tap (after the first conv + activation) and late-tap (final 4x4
    /// feature map) activations for one `[C,H,W]` image, flattened.
    pub fn features(&self, image: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = image.shape();
        if s != [self.channels, self.image_extent, self.image_extent] {
            return Err(Error::shape(format!(
                "extractor expects [{},{},{}], got {s:?}",
                self.channels, self.image_extent, self.image_extent
            )));
        }
        let mut tape = Tape::new();
        let mut shape = vec![1];
        shape.extend_from_slice(s);
        let mut x = tape.new_tensor(shape, image.data().to_vec(), false)?;
        let mut early: Option<Vec<f64>> = None;
        for block in &self.convs {
            let k = tape.leaf_tensor(&block.kernel, false);
            x = tape.conv2d(x, k, 2, 1)?;
            if let Some(bn) = &block.bn {
                let g = tape.leaf_tensor(&bn.gamma, false);
                let b = tape.leaf_tensor(&bn.beta, false);
                x = bn.apply(&mut tape, x, g, b, NetMode::Eval)?;
            }
            x = tape.leaky_relu(x, 0.2)?;
            if early.is_none() {
                early = Some(tape.value(x).to_vec());
            }
        }
        let late = tape.value(x).to_vec();
        Ok((early.expect("extractor has at least one conv"), late))
    }
}

/// Euclidean distance between the concatenated early+late activations of two
/// images.
pub fn feature_distance(extractor: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "feature_distance inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ea, la) = extractor.features(a)?;
    let (eb, lb) = extractor.features(b)?;
    let mut sum = 0.0;
    for (x, y) in ea.iter().zip(&eb).chain(la.iter().zip(&lb)) {
        let d = x - y;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// One report row; aggregate rows use the sentence id `"ALL"`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub sentence_id: String,
    pub word_index: usize,
    pub ssim: f64,
    pub feat_dist: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimilarityReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<ReportRow>,
}

impl SimilarityReport {
    /// Mean SSIM at a given 1-based word index, if present.
    pub fn mean_ssim_at(&self, word_index: usize) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|r| r.word_index == word_index)
            .map(|r| r.ssim)
    }

    pub fn max_word_index(&self) -> usize {
        self.aggregates.iter().map(|r| r.word_index).max().unwrap_or(0)
    }

    /// CSV with header `sentence_id,word_index,ssim,feat_dist`; detail rows
    /// first, aggregates last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sentence_id,word_index,ssim,feat_dist\n");
        for r in self.rows.iter().chain(&self.aggregates) {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.sentence_id, r.word_index, r.ssim, r.feat_dist
            ));
        }
        out
    }
}

/// Generates the per-word image sequence for `n_sentences` sampled captions
/// and scores every word image against the sentence's real image. Aggregate
/// rows carry per-word-index means.
#[allow(clippy::too_many_arguments)]
pub fn per_word_report(
    lstm: &LstmParams,
    gen: &GeneratorParams,
    table: &WordEmbeddingTable,
    extractor: &FeatureExtractor,
    dataset: &[CaptionedImage],
    n_sentences: usize,
    cfg: &SsimConfig,
    seed: u64,
) -> Result<SimilarityReport> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".to_string()));
    }
    if n_sentences == 0 {
        return Err(Error::arg("n_sentences must be >= 1".to_string()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut r = rng::stream(seed, "report", 0);
    order.shuffle(&mut r);

    let mut rows = Vec::new();
    let mut sums: Vec<(f64, f64, usize)> = Vec::new(); // per word index: (ssim, dist, count)
    for pick in 0..n_sentences {
        let rec = &dataset[order[pick % order.len()]];
        let caption = &rec.captions[r.random_range(0..rec.captions.len())];
        let images = generate_sequence(lstm, gen, table, caption)?;
        for (k, img) in images.iter().enumerate() {
            let s = ssim(img, &rec.image, cfg)?;
            let d = feature_distance(extractor, img, &rec.image)?;
            rows.push(ReportRow {
                sentence_id: rec.id.clone(),
                word_index: k + 1,
                ssim: s,
                feat_dist: d,
            });
            if sums.len() <= k {
                sums.resize(k + 1, (0.0, 0.0, 0));
            }
            sums[k].0 += s;
            sums[k].1 += d;
            sums[k].2 += 1;
        }
    }
    let aggregates = sums
        .iter()
        .enumerate()
        .filter(|(_, (_, _, c))| *c > 0)
        .map(|(k, (s, d, c))| ReportRow {
            sentence_id: "ALL".to_string(),
            word_index: k + 1,
            ssim: s / *c as f64,
            feat_dist: d / *c as f64,
        })
        .collect();
    Ok(SimilarityReport { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = f(y, x).clamp(-1.0, 1.0);
            }
        }
        Tensor::new(vec![h, w], data).unwrap()
    }

    /// Independent direct-formula SSIM: separate mean passes and explicit
    /// centered covariance, no shared code with the implementation.
    fn ssim_oracle(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let k = cfg.window_extent;
        let to01 = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| (v + 1.0) / 2.0).collect() };
        let ga = to01(a);
        let gb = to01(b);
        let win = gaussian_window(k, cfg.window_stddev);
        let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
        let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
        let mut vals = Vec::new();
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..k {
                    for wx in 0..k {
                        let i = (oy + wy) * w + ox + wx;
                        mu_a += win[wy * k + wx] * ga[i];
                        mu_b += win[wy * k + wx] * gb[i];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for wy in 0..k {
                    for wx in 0..k {
                        let i = (oy + wy) * w + ox + wx;
                        let da = ga[i] - mu_a;
                        let db = gb[i] - mu_b;
                        var_a += win[wy * k + wx] * da * da;
                        var_b += win[wy * k + wx] * db * db;
                        cov += win[wy * k + wx] * da * db;
                    }
                }
                vals.push(
                    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)),
                );
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let cfg = SsimConfig::default();
        let x = pattern(16, 16, |y, x| ((y * 17 + x * 5) as f64 * 0.37).sin());
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let c = pattern(16, 16, |_, _| 0.25);
        let c2 = pattern(16, 16, |_, _| 0.25);
        assert!((ssim(&c, &c2, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_formula_oracle_on_fixed_patterns() {
        let cfg = SsimConfig::default();
        let a = pattern(16, 16, |y, x| ((y as f64 * 0.8).sin() + (x as f64 * 0.5).cos()) / 2.0);
        let b = pattern(16, 16, |y, x| ((y as f64 * 0.3).cos() - (x as f64 * 0.9).sin()) / 2.0);
        let got = ssim(&a, &b, &cfg).unwrap();
        let want = ssim_oracle(&a, &b, &cfg);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");

        let c = pattern(16, 16, |y, x| if (y + x) % 2 == 0 { 0.8 } else { -0.8 });
        let d = pattern(16, 16, |y, x| if y.abs_diff(x) % 3 == 0 { 0.6 } else { -0.4 });
        let got = ssim(&c, &d, &cfg).unwrap();
        let want = ssim_oracle(&c, &d, &cfg);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let cfg = SsimConfig::default();
        let mut r = rng::stream(5, "ssim-sym", 0);
        for _ in 0..10 {
            let a = pattern(13, 13, |_, _| r.random_range(-1.0..1.0));
            let b = pattern(13, 13, |_, _| r.random_range(-1.0..1.0));
            let ab = ssim(&a, &b, &cfg).unwrap();
            let ba = ssim(&b, &a, &cfg).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_shift_invariance_within_tolerance() {
        // contrast and structure are exactly shift invariant; for a small
        // shift the full value moves by far less than 1e-6
        let cfg = SsimConfig::default();
        let mut r = rng::stream(6, "ssim-shift", 0);
        let a = pattern(16, 16, |_, _| r.random_range(-0.8..0.8));
        let noise: Vec<f64> = (0..256).map(|_| r.random_range(-0.003..0.003)).collect();
        let b = Tensor::new(
            vec![16, 16],
            a.data().iter().zip(&noise).map(|(&v, &n)| v + n).collect(),
        )
        .unwrap();
        let delta = 1e-3;
        let shift = |t: &Tensor| {
            Tensor::new(
                vec![16, 16],
                t.data().iter().map(|&v| v + delta).collect(),
            )
            .unwrap()
        };
        let base = ssim(&a, &b, &cfg).unwrap();
        let moved = ssim(&shift(&a), &shift(&b), &cfg).unwrap();
        assert!(
            (base - moved).abs() < 1e-6,
            "shift moved ssim by {}",
            (base - moved).abs()
        );
    }

    #[test]
    fn ssim_rejects_mismatch_and_oversized_window() {
        let cfg = SsimConfig::default();
        let a = pattern(16, 16, |_, _| 0.0);
        let b = pattern(8, 8, |_, _| 0.0);
        assert!(ssim(&a, &b, &cfg).is_err());
        assert!(ssim(&b, &b, &cfg).is_err()); // 11 > 8
        let bad = SsimConfig {
            window_extent: 10,
            ..Default::default()
        };
        assert!(ssim(&a, &a, &bad).is_err());
    }

    fn rgb_noise(extent: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "featimg", 0);
        Tensor::new(
            vec![3, extent, extent],
            (0..3 * extent * extent)
                .map(|_| r.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn feature_distance_is_a_metric_on_taps() {
        let ex = FeatureExtractor::seeded_random(16, 3, 4, 11).unwrap();
        let a = rgb_noise(16, 1);
        let b = rgb_noise(16, 2);
        let c = rgb_noise(16, 3);
        assert_eq!(feature_distance(&ex, &a, &a).unwrap(), 0.0);
        let ab = feature_distance(&ex, &a, &b).unwrap();
        let ba = feature_distance(&ex, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let ac = feature_distance(&ex, &a, &c).unwrap();
        let cb = feature_distance(&ex, &c, &b).unwrap();
        assert!(ab <= ac + cb + 1e-12, "triangle inequality violated");
        assert!(ab >= 0.0);
    }

    #[test]
    fn feature_distance_matches_hand_rolled_l2() {
        let ex = FeatureExtractor::seeded_random(16, 3, 4, 12).unwrap();
        let a = rgb_noise(16, 4);
        let b = rgb_noise(16, 5);
        let (ea, la) = ex.features(&a).unwrap();
        let (eb, lb) = ex.features(&b).unwrap();
        let cat_a: Vec<f64> = ea.into_iter().chain(la).collect();
        let cat_b: Vec<f64> = eb.into_iter().chain(lb).collect();
        let want = cat_a
            .iter()
            .zip(&cat_b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let got = feature_distance(&ex, &a, &b).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn report_counts_and_determinism() {
        let table = WordEmbeddingTable::new(6, 0).unwrap();
        let lstm = crate::lstm::init_lstm(6, 4, 1, 0.3).unwrap();
        let gen = crate::nets::init_generator(4, 16, 3, 4, 2).unwrap();
        let ex = FeatureExtractor::seeded_random(16, 3, 4, 3).unwrap();
        let cfg = SsimConfig::default();
        let cfg_ds = crate::text::SyntheticDatasetConfig {
            image_extent: 16,
            samples_per_combination: 1,
            ..Default::default()
        };
        let dataset = crate::text::generate_synthetic_dataset(&cfg_ds).unwrap();
        let report =
            per_word_report(&lstm, &gen, &table, &ex, &dataset, 5, &cfg, 9).unwrap();
        // captions are 8 words: 40 detail rows, 8 aggregate rows
        assert_eq!(report.rows.len(), 40);
        assert_eq!(report.aggregates.len(), 8);
        assert!(report.aggregates.iter().all(|r| r.sentence_id == "ALL"));
        let again = per_word_report(&lstm, &gen, &table, &ex, &dataset, 5, &cfg, 9).unwrap();
        assert_eq!(report, again);
        let csv = report.to_csv();
        assert!(csv.starts_with("sentence_id,word_index,ssim,feat_dist\n"));
        assert_eq!(csv.lines().count(), 1 + 40 + 8);
    }
}
