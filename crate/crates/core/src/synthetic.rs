//! Seeded synthetic fixtures: two-Gaussian embeddings over six domain tags,
//! separable enough for end-to-end training runs to converge offline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{ClaimRecord, EmbeddedClaim};

pub const DOMAINS: [&str; 6] = [
    "Political",
    "Culture",
    "Public health",
    "Society",
    "Science",
    "Life",
];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Balanced two-class claims whose vectors are drawn from two Gaussians with
/// centers `separation` apart along a random unit direction.
pub fn two_gaussian_claims(
    count: usize,
    d: usize,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> Vec<EmbeddedClaim> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut direction: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    (0..count)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            let vector: Vec<f64> = direction
                .iter()
                .map(|&u| sign * (separation / 2.0) * u + noise_std * normal(&mut rng))
                .collect();
            let domain = DOMAINS[i % DOMAINS.len()];
            let kind = if label == 0 { "verified report" } else { "fabricated story" };
            EmbeddedClaim {
                record: ClaimRecord {
                    id: format!("syn-{i:04}"),
                    text: format!("Synthetic {kind} number {i} circulating in the {domain} domain."),
                    label,
                    domain: domain.to_string(),
                    evidence: None,
                },
                vector,
            }
        })
        .collect()
}
