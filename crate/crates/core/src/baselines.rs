//! Reference partitioners: weighted k-means, a volumetric grid over the
//! PCA-reduced ball, and exhaustive search for tiny supports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::general::{pca_reduce, GeneralConfig};
use crate::partition::{loss_for_labels, Partition};

/// Largest support searched by [`brute_force_optimal`].
pub const MAX_BRUTE_FORCE_SUPPORT: usize = 10;
/// Largest number of partitions enumerated by [`brute_force_optimal`].
pub const BRUTE_FORCE_BUDGET: u128 = 1_000_000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted Lloyd iterations from a k-means++ start. Empty clusters are
/// dropped, so fewer than `k` cells may come back.
pub fn kmeans_partition(
    dist: &EmpiricalDistribution,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let n = dist.len();
    if k >= n {
        return Partition::discrete(n).with_budget(k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = sample_index(dist.weights(), dist.weights().iter().sum(), &mut rng);
    centers.push(dist.point(first).to_vec());
    let mut nearest: Vec<f64> = dist.points().iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let scores: Vec<f64> = nearest.iter().zip(dist.weights()).map(|(d, w)| d * w).collect();
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            // every support point already coincides with a center
            break;
        }
        let next = sample_index(&scores, total, &mut rng);
        let c = dist.point(next).to_vec();
        for (d, p) in nearest.iter_mut().zip(dist.points()) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut labels = assign(dist, &centers);
    for _ in 0..iters {
        let dim = dist.dim();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut mass = vec![0.0; centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            mass[l] += dist.weight(i);
            for (s, x) in sums[l].iter_mut().zip(dist.point(i)) {
                *s += dist.weight(i) * x;
            }
        }
        centers = sums
            .into_iter()
            .zip(mass)
            .filter(|(_, m)| *m > 0.0)
            .map(|(s, m)| s.into_iter().map(|v| v / m).collect())
            .collect();
        let next = assign(dist, &centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    Partition::new(labels, k)
}

fn sample_index<R: Rng>(scores: &[f64], total: f64, rng: &mut R) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, s) in scores.iter().enumerate() {
        acc += s;
        if acc > target && *s > 0.0 {
            return i;
        }
    }
    scores.iter().rposition(|s| *s > 0.0).unwrap_or(0)
}

fn assign(dist: &EmpiricalDistribution, centers: &[Vec<f64>]) -> Vec<usize> {
    dist.points()
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

/// Cells of the grid with `2J` intervals of width `1/J` per axis that meet
/// the unit ball in `R^t`, counted up to `limit + 1`.
///
/// Interval `j` has distance `a·h` to the origin with `a = j` for `j ≥ 0`
/// and `a = −j − 1` otherwise, so every `a` occurs twice per axis.
fn ball_cells(t: usize, per_half_axis: usize, limit: usize) -> usize {
    fn count(t: usize, j: usize, budget: usize, cap: usize) -> usize {
        if t == 0 {
            return 1;
        }
        let mut total = 0;
        for a in 0..j {
            let used = a * a;
            if used > budget {
                break;
            }
            total += count(t - 1, j, budget - used, cap.saturating_sub(total));
            if total > cap {
                break;
            }
        }
        total
    }
    let j = per_half_axis;
    let cap = limit >> t.min(usize::BITS as usize - 1);
    count(t, j, j * j, cap).saturating_mul(1 << t)
}

/// Grid resolution used by [`epsnet_partition`]: the largest `J` such that
/// the grid of side `1/J` has at most `k` cells meeting the unit ball in
/// `R^t`.
pub fn epsnet_resolution(t: usize, k: usize) -> usize {
    let mut j = 1;
    while ball_cells(t, j + 1, k) <= k {
        j += 1;
    }
    j
}

/// Quantizes the PCA-reduced data (same dimension as the general
/// clusterer) on the finest origin-anchored grid whose cells meeting the
/// unit ball number at most `k`. Supports of at most `k` points stay
/// discrete.
pub fn epsnet_partition(dist: &EmpiricalDistribution, k: usize) -> Result<Partition> {
    let cfg = GeneralConfig::new(k, 0);
    cfg.validate()?;
    if dist.len() <= k {
        return Partition::discrete(dist.len()).with_budget(k);
    }
    let t = cfg.target_dim().min(dist.dim());
    let pca = pca_reduce(dist, t)?;
    let j = epsnet_resolution(t, k);
    let lo = -(j as i64);
    let hi = j as i64 - 1;
    let mut keys: Vec<Vec<i64>> = Vec::new();
    let labels = pca
        .projected
        .points()
        .iter()
        .map(|p| {
            let key: Vec<i64> = p
                .iter()
                .map(|x| ((x * j as f64).floor() as i64).clamp(lo, hi))
                .collect();
            match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            }
        })
        .collect();
    let cells = Partition::new(labels, k)?;
    pca.fibers.pull_back(&cells)
}

/// Number of partitions of an `n`-set into at most `k` blocks.
pub fn partitions_up_to(n: usize, k: usize) -> u128 {
    // Stirling numbers of the second kind, row by row
    let mut row = vec![0u128; n + 1];
    row[0] = 1;
    for i in 1..=n {
        let mut next = vec![0u128; n + 1];
        for j in 1..=i {
            next[j] = j as u128 * row[j] + row[j - 1];
        }
        row = next;
    }
    row[..=k.min(n)].iter().sum()
}

/// Exhaustive minimum of `‖Σ_X − Σ_Y‖_F` over partitions of the support
/// into at most `k` cells. Ties go to the lexicographically smallest
/// canonical label vector.
pub fn brute_force_optimal(dist: &EmpiricalDistribution, k: usize) -> Result<(Partition, f64)> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let n = dist.len();
    if n > MAX_BRUTE_FORCE_SUPPORT {
        return Err(Error::InvalidParameter(format!(
            "exhaustive search needs at most {MAX_BRUTE_FORCE_SUPPORT} support points, got {n}"
        )));
    }
    let needed = partitions_up_to(n, k);
    if needed > BRUTE_FORCE_BUDGET {
        return Err(Error::EnumerationBudget {
            needed,
            budget: BRUTE_FORCE_BUDGET,
        });
    }
    // restricted growth strings in lexicographic order
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, labels.clone());
    loop {
        let cells = labels.iter().max().map_or(0, |m| m + 1);
        let loss = loss_for_labels(dist, &labels, cells);
        if loss < best.0 - 1e-14 {
            best = (loss, labels.clone());
        }
        if !next_rgs(&mut labels, k) {
            break;
        }
    }
    Ok((Partition::new(best.1, k)?, best.0))
}

fn next_rgs(labels: &mut [usize], k: usize) -> bool {
    for i in (1..labels.len()).rev() {
        let prefix_max = labels[..i].iter().max().copied().unwrap_or(0);
        if labels[i] <= prefix_max && labels[i] + 1 < k {
            labels[i] += 1;
            labels[i + 1..].iter_mut().for_each(|l| *l = 0);
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::covariance_loss;

    fn dist(rows: &[Vec<f64>]) -> EmpiricalDistribution {
        EmpiricalDistribution::from_rows(rows, None).unwrap()
    }

    fn square() -> EmpiricalDistribution {
        let a = 0.5;
        dist(&[vec![a, a], vec![a, -a], vec![-a, a], vec![-a, -a]])
    }

    #[test]
    fn kmeans_examples() {
        let d = square();
        let p = kmeans_partition(&d, 4, 0, 10).unwrap();
        assert_eq!(p.cell_count(), 4);
        assert_eq!(covariance_loss(&d, &p, &[]).unwrap().loss_frobenius, 0.0);

        let d = dist(&[vec![0.9, 0.0], vec![0.8, 0.0], vec![-0.9, 0.0], vec![-0.8, 0.0]]);
        let p = kmeans_partition(&d, 2, 5, 20).unwrap();
        assert_eq!(p.labels(), &[0, 0, 1, 1]);

        let d = square();
        let a = kmeans_partition(&d, 3, 9, 20).unwrap();
        assert_eq!(a, kmeans_partition(&d, 3, 9, 20).unwrap());
        assert!(a.cell_count() <= 3);
        assert!(kmeans_partition(&d, 0, 0, 1).is_err());
    }

    #[test]
    fn epsnet_resolution_in_one_dimension() {
        for k in 3..40 {
            assert_eq!(epsnet_resolution(1, k), k / 2);
        }
        assert_eq!(ball_cells(2, 1, 100), 4);
        assert_eq!(ball_cells(2, 2, 100), 16);
        assert_eq!(ball_cells(2, 3, 100), 36);
        // J = 5: a = (4, 4) is the only tuple outside the ball
        assert_eq!(ball_cells(2, 5, 1000), 4 * 24);
        assert!(ball_cells(2, 5, 10) > 10);
    }

    #[test]
    fn epsnet_examples() {
        // 1-dim data with k = 8: intervals of width 1/4
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![-0.975 + 0.05 * i as f64]).collect();
        let d = dist(&rows);
        let p = epsnet_partition(&d, 8).unwrap();
        assert_eq!(p.cell_count(), 8);
        for cell in p.cells() {
            assert_eq!(cell.len(), 5);
        }

        let d = dist(&[vec![0.2, 0.3]]);
        let p = epsnet_partition(&d, 5).unwrap();
        assert_eq!(p.cell_count(), 1);

        let d = dist(&(0..50).map(|i| vec![(i as f64 * 0.37).sin() * 0.9]).collect::<Vec<_>>());
        let mut last = f64::INFINITY;
        for k in [4, 8, 16, 32] {
            let p = epsnet_partition(&d, k).unwrap();
            assert!(p.cell_count() <= k);
            let loss = covariance_loss(&d, &p, &[]).unwrap().loss_frobenius;
            assert!(loss <= last + 1e-12);
            last = loss;
        }
    }

    #[test]
    fn stirling_counts() {
        assert_eq!(partitions_up_to(4, 4), 15);
        assert_eq!(partitions_up_to(4, 2), 8);
        assert_eq!(partitions_up_to(10, 10), 115_975);
        assert_eq!(partitions_up_to(0, 3), 1);
    }

    #[test]
    fn rgs_enumerates_every_partition() {
        for (n, k) in [(4, 4), (5, 2), (6, 3), (1, 1)] {
            let mut labels = vec![0; n];
            let mut seen = 1;
            while next_rgs(&mut labels, k) {
                seen += 1;
            }
            assert_eq!(seen as u128, partitions_up_to(n, k));
        }
    }

    #[test]
    fn brute_force_examples() {
        let d = square();
        let (p, loss) = brute_force_optimal(&d, 4).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(p.cell_count(), 4);

        let d = dist(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let (_, loss) = brute_force_optimal(&d, 1).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);

        // square, k = 2: halving along either axis leaves one axis intact
        let d = square();
        let (p, loss) = brute_force_optimal(&d, 2).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
        assert_eq!(p.labels(), &[0, 0, 1, 1]);

        let big = dist(&(0..11).map(|i| vec![i as f64 / 20.0]).collect::<Vec<_>>());
        assert!(matches!(
            brute_force_optimal(&big, 2),
            Err(Error::InvalidParameter(_))
        ));
    }
}
