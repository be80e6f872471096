//! Seeded fixtures shared by the benchmarks.

use get_core::harness::{presets, CellConfig};
use get_core::numerics::ProbabilityMatrix;
use get_core::{DomainPair, Method, Scenario};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n x c` row-stochastic matrix with unevenly weighted columns.
pub fn skewed_posterior(n: usize, c: usize, seed: u64) -> ProbabilityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..c).map(|k| 1.0 / (k + 1) as f64).collect();
    let mut m = Array2::from_shape_fn((n, c), |(_, k)| rng.random_range(0.01..1.0) * weights[k]);
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    ProbabilityMatrix::new(m).expect("rows normalized")
}

pub fn gaussian_like(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// The imbalanced benchmark pair for one seed.
pub fn benchmark_pair(seed: u64) -> DomainPair {
    let config = presets::imbalanced_uda();
    CellConfig::new(&config, Method::Get, Scenario::Uda, 0.3, seed)
        .domain_pair()
        .expect("preset is valid")
}
