//! Deterministic inputs shared by the benchmarks.

use lpr_core::linalg::Matrix;
use lpr_core::{Batch, Network, SplitMix64};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn network(widths: &[usize], seed: u64) -> Network {
    Network::new(widths, &mut SplitMix64::new(seed)).expect("valid widths")
}

pub fn batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = SplitMix64::new(seed);
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    Batch::new(gaussian(n, dim, seed ^ 1), labels).expect("matching lengths")
}

/// `I + ω ZᵀZ` for a random `m × d` matrix `Z`.
pub fn spd(m: usize, d: usize, omega: f64, seed: u64) -> Matrix {
    let z = gaussian(m, d, seed);
    let mut p = z.gram().scale(omega);
    for i in 0..d {
        p.set(i, i, p.get(i, i) + 1.0);
    }
    p
}
