//! Small deterministic fixtures for demos and tests: a memorizing toy model
//! and synthetic private datasets for the attack harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pipeline::PrivateExample;
use crate::provider::{ToyModel, ToyModelSpec};

/// Printable-ASCII character model with random context logits (order 2,
/// scale 1) and a copy head that echoes earlier prompt text.
pub fn memorizing_model(seed: u64, copy_weight: f64, copy_max_match: usize) -> ToyModel {
    let spec = ToyModelSpec::new(ToyModelSpec::printable_ascii_vocab(), "<eos>", 2)
        .and_then(|s| s.with_fallback(seed, 1.0))
        .and_then(|s| s.with_copy(copy_weight, copy_max_match))
        .expect("fixture parameters are valid");
    ToyModel::new(spec)
}

fn word<R: Rng>(rng: &mut R) -> String {
    let len = rng.random_range(3..8);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

/// A lowercase pseudo-sentence of `words` words.
pub fn sentence<R: Rng>(rng: &mut R, words: usize) -> String {
    (0..words).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

/// `n` records, exactly one of which carries `canary` after the cue
/// `"email address: "`. The others contain no email address.
pub fn pii_dataset(n: usize, canary: &str, seed: u64) -> Vec<PrivateExample> {
    assert!(n >= 1, "need at least the canary record");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canary_at = rng.random_range(0..n);
    (0..n)
        .map(|i| {
            let text = if i == canary_at {
                format!("{} email address: {canary}", sentence(&mut rng, 3))
            } else {
                sentence(&mut rng, 6)
            };
            PrivateExample::new(text, if i % 2 == 0 { "world" } else { "sports" }).expect("non-empty text")
        })
        .collect()
}

/// Disjoint member and non-member pools, labels alternating `pos` / `neg`.
pub fn mia_pools(members: usize, nonmembers: usize, seed: u64) -> (Vec<PrivateExample>, Vec<PrivateExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut all = Vec::with_capacity(members + nonmembers);
    while all.len() < members + nonmembers {
        let text = sentence(&mut rng, 4);
        if seen.insert(text.clone()) {
            let label = if all.len() % 2 == 0 { "pos" } else { "neg" };
            all.push(PrivateExample::new(text, label).expect("non-empty text"));
        }
    }
    let nonmember_pool = all.split_off(members);
    (all, nonmember_pool)
}
