//! Seeded fixtures shared by the benchmarks.

use covloss::EmpiricalDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `n` points drawn uniformly from the unit sphere in `R^m`.
pub fn sphere(n: usize, m: usize, seed: u64) -> EmpiricalDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / r).collect()
        })
        .collect();
    EmpiricalDistribution::from_rows(&rows, None).expect("sphere points lie in the ball")
}

/// `n` points of `{±1}^m/√m`: every coordinate copies the sign of one
/// latent coin with probability `0.75` and is flipped otherwise.
pub fn boolean(n: usize, m: usize, seed: u64) -> EmpiricalDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (m as f64).sqrt();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let latent = rng.random_bool(0.5);
            (0..m)
                .map(|_| if latent == rng.random_bool(0.75) { s } else { -s })
                .collect()
        })
        .collect();
    EmpiricalDistribution::from_rows(&rows, None).expect("cube points lie in the ball")
}
