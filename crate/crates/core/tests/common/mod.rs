#![allow(dead_code)]

use projfold::projection::{ClusterAssignment, PruneSelection};
use projfold::WeightMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut impl Rng, m: usize, p: usize) -> WeightMatrix {
    WeightMatrix::new(m, p, (0..m * p).map(|_| rng.random_range(-1.0..=1.0)).collect()).unwrap()
}

pub fn random_selection(rng: &mut impl Rng, m: usize) -> PruneSelection {
    let k = rng.random_range(0..=m);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx.sort_unstable();
    PruneSelection::new(idx, m).unwrap()
}

/// Uniform labels in [0, k) with every cluster forced nonempty.
pub fn random_assignment(rng: &mut impl Rng, m: usize) -> ClusterAssignment {
    let k = rng.random_range(1..=m);
    let mut labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    let mut rows: Vec<usize> = (0..m).collect();
    rows.shuffle(rng);
    for (c, &r) in rows.iter().take(k).enumerate() {
        labels[r] = c;
    }
    ClusterAssignment::new(labels, k).unwrap()
}

pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) || (a - b).abs() <= rtol * 1e-300
}
