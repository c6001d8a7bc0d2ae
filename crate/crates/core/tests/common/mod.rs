#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucds::graph::AffinityMatrix;
use ucds::linalg::SquareMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric zero-diagonal matrix with integer weights in `0..=max_weight`.
pub fn integer_weights(rng: &mut impl Rng, z: usize, max_weight: u32) -> SquareMatrix {
    let mut m = SquareMatrix::zeros(z);
    for i in 0..z {
        for j in 0..i {
            let w = rng.random_range(0..=max_weight) as f64;
            m.set(i, j, w);
            m.set(j, i, w);
        }
    }
    m
}

/// Graph on `2..=max_z` vertices (size drawn from `rng`) with vertex 0 as
/// the constraint.
pub fn random_graph(rng: &mut impl Rng, max_z: usize, max_weight: u32) -> AffinityMatrix {
    let z = rng.random_range(2..=max_z);
    AffinityMatrix::from_weights(integer_weights(rng, z, max_weight), 0).unwrap()
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}
