//! Input generators shared by the benchmarks.

use curate_core::sampler::Candidate;
use curate_core::CategoryLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` code lines, with every fifth one rewritten in the second copy.
pub fn line_pair(n: usize) -> (Vec<String>, Vec<String>) {
    let a: Vec<String> = (0..n).map(|i| format!("    let v{i} = v{} + {i};", i / 2)).collect();
    let b = a
        .iter()
        .enumerate()
        .map(|(i, l)| if i % 5 == 0 { format!("{l} // edited") } else { l.clone() })
        .collect();
    (a, b)
}

pub fn points(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("pt-{i:06}"), (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
        .collect()
}

/// Candidates spread over all categories with scores and embeddings.
pub fn candidates(n: usize, dim: usize, seed: u64) -> Vec<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points(n, dim, seed ^ 0x5eed)
        .into_iter()
        .enumerate()
        .map(|(i, (id, emb))| {
            let p = rng.random_range(0.0..1.0);
            Candidate {
                p: Some(p),
                q: Some(p),
                f: Some(1.0),
                embedding: Some(emb),
                ..Candidate::new(id, CategoryLabel::ALL[i % CategoryLabel::COUNT])
            }
        })
        .collect()
}

pub fn scores(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
}
