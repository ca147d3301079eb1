//! Property tests for the library's structural invariants.

use proptest::prelude::*;

use wordgan_core::eval::{ssim, SsimConfig};
use wordgan_core::tensor::{Tape, Tensor};
use wordgan_core::text::{sentence_condition_mean, tokenize, WordEmbeddingTable};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenize_is_lowercase_alphanumeric_and_whitespace_insensitive(
        words in proptest::collection::vec("[a-zA-Z0-9]{1,8}", 0..8),
        seps in proptest::collection::vec(" {1,3}", 0..8),
    ) {
        let mut text = String::new();
        for (i, w) in words.iter().enumerate() {
            text.push_str(w);
            text.push_str(seps.get(i).map(|s| s.as_str()).unwrap_or(" "));
        }
        let tokens = tokenize(&text);
        prop_assert_eq!(tokens.len(), words.len());
        for (t, w) in tokens.iter().zip(&words) {
            let lower = w.to_lowercase();
            prop_assert_eq!(t.as_str(), lower.as_str());
            prop_assert!(t.chars().all(|c| c.is_alphanumeric() && !c.is_uppercase()));
        }
    }

    #[test]
    fn trailing_broadcast_add_matches_rowwise_loop(
        rows in 1usize..5,
        cols in 1usize..6,
        scale in 0.1f64..10.0,
    ) {
        let a_data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.7 - 1.0) * scale).collect();
        let b_data: Vec<f64> = (0..cols).map(|i| (i as f64 * 1.3 + 0.5) * scale).collect();
        let mut tape = Tape::new();
        let a = tape.new_tensor(vec![rows, cols], a_data.clone(), false).unwrap();
        let b = tape.new_tensor(vec![cols], b_data.clone(), false).unwrap();
        let c = tape.add(a, b).unwrap();
        for r in 0..rows {
            for k in 0..cols {
                prop_assert_eq!(
                    tape.value(c)[r * cols + k],
                    a_data[r * cols + k] + b_data[k]
                );
            }
        }
    }

    #[test]
    fn concat_then_split_recovers_inputs(
        left in 1usize..4,
        right in 1usize..4,
        rows in 1usize..4,
    ) {
        let a_data: Vec<f64> = (0..rows * left).map(|i| i as f64).collect();
        let b_data: Vec<f64> = (0..rows * right).map(|i| -(i as f64) - 1.0).collect();
        let mut tape = Tape::new();
        let a = tape.new_tensor(vec![rows, left], a_data.clone(), false).unwrap();
        let b = tape.new_tensor(vec![rows, right], b_data.clone(), false).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        let total = left + right;
        for r in 0..rows {
            for k in 0..left {
                prop_assert_eq!(tape.value(c)[r * total + k], a_data[r * left + k]);
            }
            for k in 0..right {
                prop_assert_eq!(tape.value(c)[r * total + left + k], b_data[r * right + k]);
            }
        }
    }

    #[test]
    fn repeated_use_accumulates_gradient(copies in 2usize..6) {
        // d(x + x + ... + x)/dx = number of copies
        let mut tape = Tape::new();
        let x = tape.new_tensor(vec![1], vec![0.37], true).unwrap();
        let mut acc = x;
        for _ in 1..copies {
            acc = tape.add(acc, x).unwrap();
        }
        let grads = tape.backward(acc).unwrap();
        prop_assert_eq!(grads.get(x).unwrap().data()[0], copies as f64);
    }

    #[test]
    fn mean_condition_is_permutation_invariant(perm_seed in 0u64..1000) {
        let table = WordEmbeddingTable::new(6, 3).unwrap();
        let mut tokens: Vec<String> = ["one", "large", "red", "circle", "on", "white"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let base = sentence_condition_mean(&table, &tokens).unwrap();
        // deterministic pseudo-shuffle
        let mut s = perm_seed;
        for i in (1..tokens.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            let j = (s >> 33) as usize % (i + 1);
            tokens.swap(i, j);
        }
        let permuted = sentence_condition_mean(&table, &tokens).unwrap();
        for (x, y) in base.vector.data().iter().zip(permuted.vector.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_symmetry_and_bounds(seed in 0u64..500) {
        let cfg = SsimConfig::default();
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        let mut gen = || -> f64 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = Tensor::new(vec![12, 12], (0..144).map(|_| gen()).collect()).unwrap();
        let b = Tensor::new(vec![12, 12], (0..144).map(|_| gen()).collect()).unwrap();
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }
}
