//! Seeded demonstration sampling.
//!
//! All run-level randomness derives from the run seed. The generator is
//! pinned so DemoSets are reproducible across platforms and languages:
//!
//! * stream: ChaCha20 (IETF, RFC 8439) keyed with the 8-byte little-endian
//!   seed left-padded with zeros to 32 bytes, zero nonce, consumed as a
//!   sequence of little-endian u64 words;
//! * bounded draws: rejection sampling — draw u64 words, mask to the
//!   smallest power of two covering the bound, reject values >= bound;
//! * selection: partial Fisher-Yates over train indices, taking the first
//!   k swapped positions in sampled order.
//!
//! There is deliberately no prefix property: sample(k=1) need not be a
//! prefix of sample(k=3); each (seed, k) run is sampled independently.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::AbscInstance;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSet {
    pub seed: u64,
    pub k: usize,
    pub demos: Vec<AbscInstance>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("k ({k}) exceeds train size ({train_size})")]
    KTooLarge { k: usize, train_size: usize },
}

fn rng_for(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Uniform draw in [0, bound) by masked rejection on raw u64 words.
fn bounded(rng: &mut ChaCha20Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let mask = u64::MAX >> (bound - 1).leading_zeros().min(63);
    loop {
        let v = rng.next_u64() & mask;
        if v < bound {
            return v;
        }
    }
}

/// Sample k training instances without replacement, in sampled order.
pub fn sample_demos(
    train: &[AbscInstance],
    seed: u64,
    k: usize,
) -> Result<DemoSet, SamplerError> {
    if k > train.len() {
        return Err(SamplerError::KTooLarge {
            k,
            train_size: train.len(),
        });
    }
    let mut rng = rng_for(seed);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut demos = Vec::with_capacity(k);
    for i in 0..k {
        let remaining = (train.len() - i) as u64;
        let j = i + bounded(&mut rng, remaining) as usize;
        indices.swap(i, j);
        demos.push(train[indices[i]].clone());
    }
    Ok(DemoSet { seed, k, demos })
}

/// Stable subseed derivation: SHA-256 over the 8-byte little-endian seed
/// followed by the UTF-8 label, first 8 digest bytes read little-endian.
pub fn derive_subseed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Polarity;
    use std::collections::HashSet;

    fn toy_train(n: usize) -> Vec<AbscInstance> {
        (0..n)
            .map(|i| AbscInstance {
                sentence: format!("Sentence number {i}."),
                aspect_term: format!("aspect{i}"),
                polarity: Polarity::ALL[i % 3],
                source_id: format!("{i}:0"),
                char_span: None,
            })
            .collect()
    }

    #[test]
    fn same_inputs_give_identical_demo_sets() {
        let train = toy_train(50);
        let a = sample_demos(&train, 13, 3).unwrap();
        let b = sample_demos(&train, 13, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_k_is_a_permutation() {
        let train = toy_train(20);
        let set = sample_demos(&train, 13, 20).unwrap();
        let ids: HashSet<_> = set.demos.iter().map(|d| d.source_id.clone()).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn k_too_large_is_rejected() {
        let train = toy_train(5);
        assert_eq!(
            sample_demos(&train, 13, 6),
            Err(SamplerError::KTooLarge { k: 6, train_size: 5 })
        );
    }

    #[test]
    fn different_seeds_differ() {
        let train = toy_train(200);
        let a = sample_demos(&train, 13, 3).unwrap();
        let b = sample_demos(&train, 42, 3).unwrap();
        assert_ne!(a.demos, b.demos);
    }

    // Golden values established by the first run of the pinned generator and
    // frozen here; a change means the sampling algorithm drifted.
    #[test]
    fn pinned_generator_golden_indices() {
        let train = toy_train(100);
        let pick = |seed: u64, k: usize| -> Vec<String> {
            sample_demos(&train, seed, k)
                .unwrap()
                .demos
                .iter()
                .map(|d| d.source_id.clone())
                .collect()
        };
        assert_eq!(pick(13, 3), ["24:0", "10:0", "66:0"]);
        assert_eq!(pick(42, 3), ["31:0", "99:0", "24:0"]);
        assert_eq!(pick(550, 3), ["19:0", "17:0", "55:0"]);
    }

    #[test]
    fn subseed_is_stable_and_label_sensitive() {
        assert_eq!(derive_subseed(13, "demos"), derive_subseed(13, "demos"));
        assert_ne!(derive_subseed(13, "demos"), derive_subseed(13, "praise-dev"));
        assert_ne!(derive_subseed(42, "demos"), derive_subseed(13, "demos"));
    }

    #[test]
    fn no_duplicate_source_ids_across_seeds_and_k() {
        let train = toy_train(30);
        for seed in [13u64, 42, 550] {
            for k in [1usize, 3, 9, 30] {
                let set = sample_demos(&train, seed, k).unwrap();
                let ids: HashSet<_> = set.demos.iter().map(|d| &d.source_id).collect();
                assert_eq!(ids.len(), k);
            }
        }
    }
}
