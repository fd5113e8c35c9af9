//! Means, covariance matrices, moment tensors and Frobenius distances.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};

/// Smallest eigenvalue still regarded as positive semi-definite.
pub const PSD_TOLERANCE: f64 = -1e-9;
/// Largest moment tensor materialized, in entries.
pub const MAX_TENSOR_ENTRIES: usize = 10_000_000;

/// A symmetric `m × m` matrix: a covariance `Σ` or an uncentered second
/// moment `E[XXᵀ]`. Serializes as row-major nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.0[(i, j)]).collect())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Serialize for CovarianceMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CovarianceMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("matrix must be square"));
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
    }
}

pub(crate) fn weighted_mean(points: &[Vec<f64>], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut mu = vec![0.0; dim];
    for (p, &w) in points.iter().zip(weights) {
        for (m, x) in mu.iter_mut().zip(p) {
            *m += w * x;
        }
    }
    mu
}

/// `Σ_i w_i (x_i − c)(x_i − c)ᵀ`, accumulated on the upper triangle and mirrored.
pub(crate) fn weighted_scatter(
    points: &[Vec<f64>],
    weights: &[f64],
    center: &[f64],
    dim: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, dim);
    let mut d = vec![0.0; dim];
    for (p, &w) in points.iter().zip(weights) {
        for (di, (x, c)) in d.iter_mut().zip(p.iter().zip(center)) {
            *di = x - c;
        }
        for i in 0..dim {
            let wi = w * d[i];
            for j in i..dim {
                out[(i, j)] += wi * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

/// Two-pass covariance of a weighted point set.
pub(crate) fn weighted_covariance(points: &[Vec<f64>], weights: &[f64], dim: usize) -> DMatrix<f64> {
    let mu = weighted_mean(points, weights, dim);
    weighted_scatter(points, weights, &mu, dim)
}

pub(crate) fn weighted_second_moment(
    points: &[Vec<f64>],
    weights: &[f64],
    dim: usize,
) -> DMatrix<f64> {
    weighted_scatter(points, weights, &vec![0.0; dim], dim)
}

/// `Σ_X = E[(X − EX)(X − EX)ᵀ]`.
pub fn covariance(dist: &EmpiricalDistribution) -> CovarianceMatrix {
    CovarianceMatrix(weighted_covariance(dist.points(), dist.weights(), dist.dim()))
}

/// `E[XXᵀ]`.
pub fn second_moment(dist: &EmpiricalDistribution) -> CovarianceMatrix {
    CovarianceMatrix(weighted_second_moment(
        dist.points(),
        dist.weights(),
        dist.dim(),
    ))
}

pub fn frobenius_distance(a: &CovarianceMatrix, b: &CovarianceMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(a.0
        .iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &CovarianceMatrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(a.matrix())?
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(symmetric_eigen(m)?.eigenvalues.iter().copied().collect())
}

pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))
}

/// The order-`d` moment tensor `E[X^{⊗d}]`, stored row-major with the
/// first index slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl MomentTensor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let flat = index.iter().fold(0, |acc, &i| acc * self.dim + i);
        self.entries[flat]
    }

    pub fn frobenius_distance(&self, other: &MomentTensor) -> Result<f64> {
        if self.order != other.order || self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.entries.len(),
                found: other.entries.len(),
            });
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

fn tensor_size(dim: usize, order: usize) -> Result<usize> {
    if !(1..=4).contains(&order) {
        return Err(Error::InvalidParameter(format!(
            "tensor order must be in 1..=4, got {order}"
        )));
    }
    let size = (0..order).try_fold(1usize, |acc, _| acc.checked_mul(dim));
    match size {
        Some(s) if s <= MAX_TENSOR_ENTRIES => Ok(s),
        _ => Err(Error::InvalidParameter(format!(
            "moment tensor of order {order} in dimension {dim} exceeds {MAX_TENSOR_ENTRIES} entries"
        ))),
    }
}

pub(crate) fn weighted_moment_tensor(
    points: &[Vec<f64>],
    weights: &[f64],
    dim: usize,
    order: usize,
) -> Result<MomentTensor> {
    let size = tensor_size(dim, order)?;
    let mut entries = vec![0.0; size];
    let mut power = vec![0.0; size];
    for (p, &w) in points.iter().zip(weights) {
        // outer power built one factor at a time
        power[0] = w;
        let mut len = 1;
        for _ in 0..order {
            for a in (0..len).rev() {
                let base = power[a];
                for (b, x) in p.iter().enumerate() {
                    power[a * dim + b] = base * x;
                }
            }
            len *= dim;
        }
        for (e, v) in entries.iter_mut().zip(&power) {
            *e += v;
        }
    }
    Ok(MomentTensor {
        order,
        dim,
        entries,
    })
}

/// `E[X^{⊗d}]` for `1 ≤ d ≤ 4`.
pub fn moment_tensor(dist: &EmpiricalDistribution, order: usize) -> Result<MomentTensor> {
    weighted_moment_tensor(dist.points(), dist.weights(), dist.dim(), order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(rows: &[Vec<f64>]) -> EmpiricalDistribution {
        EmpiricalDistribution::from_rows(rows, None).unwrap()
    }

    fn mat(rows: &[[f64; 2]; 2]) -> CovarianceMatrix {
        CovarianceMatrix(DMatrix::from_fn(2, 2, |i, j| rows[i][j]))
    }

    /// Naive `E[XXᵀ] − μμᵀ`, an independent route to the covariance.
    fn naive_covariance(d: &EmpiricalDistribution) -> Vec<Vec<f64>> {
        let m = d.dim();
        let mut mu = vec![0.0; m];
        let mut sxx = vec![vec![0.0; m]; m];
        for (p, w) in d.points().iter().zip(d.weights()) {
            for i in 0..m {
                mu[i] += w * p[i];
                for j in 0..m {
                    sxx[i][j] += w * p[i] * p[j];
                }
            }
        }
        (0..m)
            .map(|i| (0..m).map(|j| sxx[i][j] - mu[i] * mu[j]).collect())
            .collect()
    }

    #[test]
    fn covariance_examples() {
        let c = covariance(&dist(&[vec![1.0, 0.0], vec![-1.0, 0.0]]));
        assert_eq!(c.to_rows(), vec![vec![1.0, 0.0], vec![0.0, 0.0]]);

        let c = covariance(&dist(&[vec![0.3, 0.4]]));
        assert_eq!(c.frobenius_norm(), 0.0);

        let a = std::f64::consts::FRAC_1_SQRT_2;
        let d = dist(&[vec![a, 0.0], vec![0.0, a]]);
        let c = covariance(&d);
        let naive = naive_covariance(&d);
        let expected = [[0.125, -0.125], [-0.125, 0.125]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.get(i, j) - expected[i][j]).abs() < 1e-15);
                assert!((c.get(i, j) - naive[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn frobenius_examples() {
        let id = mat(&[[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(frobenius_distance(&id, &id).unwrap(), 0.0);
        let z = CovarianceMatrix::zeros(2);
        assert!((frobenius_distance(&id, &z).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let a = mat(&[[1.0, 0.0], [0.0, 0.0]]);
        let b = mat(&[[0.0, 0.0], [0.0, 1.0]]);
        assert!((frobenius_distance(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(frobenius_distance(&a, &CovarianceMatrix::zeros(3)).is_err());
    }

    #[test]
    fn eigenvalue_examples() {
        assert!((min_eigenvalue(&mat(&[[1.0, 0.0], [0.0, 1.0]])).unwrap() - 1.0).abs() < 1e-14);
        assert!(min_eigenvalue(&mat(&[[1.0, 0.0], [0.0, 0.0]])).unwrap().abs() < 1e-14);
        assert!((min_eigenvalue(&mat(&[[2.0, 1.0], [1.0, 2.0]])).unwrap() - 1.0).abs() < 1e-14);
        assert!(min_eigenvalue(&mat(&[[f64::NAN, 0.0], [0.0, 1.0]])).is_err());
    }

    #[test]
    fn tensor_examples() {
        let d = dist(&[vec![0.2, 0.4], vec![0.6, -0.2]]);
        let t1 = moment_tensor(&d, 1).unwrap();
        let mu = d.mean();
        assert_eq!(t1.entries(), &mu[..]);

        let x = [0.3, -0.5, 0.1];
        let t2 = moment_tensor(&dist(&[x.to_vec()]), 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t2.get(&[i, j]), x[i] * x[j]);
            }
        }

        let t3 = moment_tensor(&dist(&[vec![1.0], vec![-1.0]]), 3).unwrap();
        assert_eq!(t3.entries(), &[0.0]);

        assert!(moment_tensor(&d, 0).is_err());
        assert!(moment_tensor(&d, 5).is_err());
        let wide = dist(&[vec![0.0; 100]]);
        assert!(moment_tensor(&wide, 4).is_err());
    }

    #[test]
    fn tensor_is_symmetric() {
        let d = dist(&[vec![0.2, 0.4, -0.1], vec![0.6, -0.2, 0.3], vec![-0.5, 0.1, 0.1]]);
        let t = moment_tensor(&d, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    let v = t.get(&[i, j, l]);
                    for perm in [[j, i, l], [l, j, i], [i, l, j], [j, l, i], [l, i, j]] {
                        assert!((v - t.get(&perm)).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    fn weighted_ball() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..6, 1usize..20).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(prop::collection::vec(-0.3f64..0.3, m), n),
                prop::collection::vec(0.01f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_naive_and_is_psd((rows, w) in weighted_ball()) {
            let d = EmpiricalDistribution::from_rows(&rows, Some(&w)).unwrap();
            let c = covariance(&d);
            let naive = naive_covariance(&d);
            for i in 0..d.dim() {
                for j in 0..d.dim() {
                    prop_assert!((c.get(i, j) - naive[i][j]).abs() < 1e-12);
                    prop_assert_eq!(c.get(i, j), c.get(j, i));
                }
            }
            prop_assert!(min_eigenvalue(&c).unwrap() >= PSD_TOLERANCE);
        }

        #[test]
        fn permutation_and_translation_invariance((rows, w) in weighted_ball(), shift in -0.1f64..0.1) {
            let d = EmpiricalDistribution::from_rows(&rows, Some(&w)).unwrap();
            let c = covariance(&d);
            let mut rev_rows = rows.clone();
            let mut rev_w = w.clone();
            rev_rows.reverse();
            rev_w.reverse();
            let r = covariance(&EmpiricalDistribution::from_rows(&rev_rows, Some(&rev_w)).unwrap());
            prop_assert!(frobenius_distance(&c, &r).unwrap() < 1e-12);
            let shifted: Vec<Vec<f64>> = rows.iter().map(|p| p.iter().map(|v| v + shift).collect()).collect();
            let s = covariance(&EmpiricalDistribution::from_rows(&shifted, Some(&w)).unwrap());
            for i in 0..d.dim() {
                for j in 0..d.dim() {
                    prop_assert!((c.get(i, j) - s.get(i, j)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn second_tensor_minus_mean_square_is_covariance((rows, w) in weighted_ball()) {
            let d = EmpiricalDistribution::from_rows(&rows, Some(&w)).unwrap();
            let t2 = moment_tensor(&d, 2).unwrap();
            let t1 = moment_tensor(&d, 1).unwrap();
            let c = covariance(&d);
            let m = d.dim();
            for i in 0..m {
                for j in 0..m {
                    let v = t2.get(&[i, j]) - t1.get(&[i]) * t1.get(&[j]);
                    prop_assert!((v - c.get(i, j)).abs() <= 1e-12);
                }
            }
        }
    }
}
