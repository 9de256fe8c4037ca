//! Shared input builders for the hot-path benchmarks.

use compass_core::cluster::EmbeddingSet;
use compass_core::corpus::Condition;
use compass_core::pct::{AnswerChoice, AnswerSheet, CompassPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn random_sheets(n: usize, seed: u64) -> Vec<AnswerSheet> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut sheet = AnswerSheet::new(i as u32, Condition::Baseline);
            for id in 1..=62u8 {
                let choice = AnswerChoice::ALL[rng.random_range(0..4)];
                sheet.set(id, choice).unwrap();
            }
            sheet
        })
        .collect()
}

pub fn random_points(n: usize, seed: u64) -> Vec<CompassPoint> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            CompassPoint::new(
                rng.random_range(-10.0..=10.0),
                rng.random_range(-10.0..=10.0),
            )
        })
        .collect()
}

/// Distinct magnitudes with mixed signs: the tie-free worst case for the
/// ranking sort.
pub fn signed_diffs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (1..=n)
        .map(|i| {
            let sign = if rng.random_bool(0.8) { 1.0 } else { -1.0 };
            sign * i as f64
        })
        .collect()
}

/// Three separable gaussian-ish blobs in `dim` dimensions.
pub fn blob_embeddings(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let vectors = (0..n)
        .map(|i| {
            let component = i % 3;
            (0..dim)
                .map(|j| {
                    let base = if j % 3 == component { 4.0 } else { 0.0 };
                    let jitter: f64 =
                        (0..12).map(|_| rng.random_range(0.0..1.0)).sum::<f64>() - 6.0;
                    base + 0.5 * jitter
                })
                .collect()
        })
        .collect();
    EmbeddingSet {
        persona_ids: (0..n as u32).collect(),
        vectors,
        provider_tag: "bench".to_string(),
        dim,
    }
}
