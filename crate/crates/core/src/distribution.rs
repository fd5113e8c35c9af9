//! Finitely supported distributions on the unit ball.
//!
//! An [`EmpiricalDistribution`] holds distinct support points, their strictly
//! positive probabilities and, when it was built from unweighted rows, the
//! number of source rows merged into each point. The counts give the
//! anonymity machinery an exact notion of "cell size".

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows with norm in `(1 + NORM_SLACK, 1 + NORM_REJECT]` are pulled back onto the sphere.
pub const NORM_SLACK: f64 = 1e-12;
/// Rows with norm above `1 + NORM_REJECT` are rejected.
pub const NORM_REJECT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    dim: usize,
    counts: Option<Vec<usize>>,
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn bits_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Sum of weights is accepted as already normalized within this slack.
fn renorm_slack(n: usize) -> f64 {
    (4.0 * n as f64 * f64::EPSILON).clamp(1e-15, 1e-13)
}

impl EmpiricalDistribution {
    /// Builds a distribution from raw rows. Without weights every row gets
    /// mass `1/n`; duplicated rows are merged and their masses added.
    pub fn from_rows(rows: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Self> {
        Self::from_rows_indexed(rows, weights).map(|(dist, _)| dist)
    }

    /// Like [`from_rows`](Self::from_rows), also returning the support index
    /// of every input row (`None` for rows dropped with zero weight).
    pub fn from_rows_indexed(
        rows: &[Vec<f64>],
        weights: Option<&[f64]>,
    ) -> Result<(Self, Vec<Option<usize>>)> {
        let first = rows.first().ok_or(Error::EmptyInput)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "rows must have at least one coordinate".into(),
            ));
        }
        let mut cleaned = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i });
            }
            let r = norm(row);
            if r > 1.0 + NORM_REJECT {
                return Err(Error::NormExceeded { row: i, norm: r });
            }
            let point: Vec<f64> = if r > 1.0 + NORM_SLACK {
                row.iter().map(|v| v / r + 0.0).collect()
            } else {
                row.iter().map(|v| v + 0.0).collect()
            };
            cleaned.push(point);
        }

        match weights {
            None => {
                let n = rows.len();
                let (points, counts, index) = merge_counted(cleaned, vec![1; n]);
                let total = n as f64;
                let weights = counts.iter().map(|&c| c as f64 / total).collect();
                let index = index.into_iter().map(Some).collect();
                Ok((
                    Self {
                        points,
                        weights,
                        dim,
                        counts: Some(counts),
                    },
                    index,
                ))
            }
            Some(w) => {
                if w.len() != rows.len() {
                    return Err(Error::InvalidWeights(format!(
                        "{} weights for {} rows",
                        w.len(),
                        rows.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidWeights(
                        "weights must be finite and nonnegative".into(),
                    ));
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidWeights("weights sum to zero".into()));
                }
                let mut kept = Vec::new();
                let mut kept_w = Vec::new();
                let mut kept_rows = Vec::new();
                for (i, (p, &wi)) in cleaned.into_iter().zip(w).enumerate() {
                    if wi > 0.0 {
                        kept.push(p);
                        kept_w.push(wi);
                        kept_rows.push(i);
                    }
                }
                let (dist, local) = Self::merge_weighted(kept, kept_w, None, dim);
                let mut index = vec![None; rows.len()];
                for (row, support) in kept_rows.into_iter().zip(local) {
                    index[row] = Some(support);
                }
                Ok((dist, index))
            }
        }
    }

    /// Merges exact duplicates of already validated points, sums weights and
    /// counts, and normalizes the weights once if they are not already
    /// normalized. Returns the map from input position to support index.
    pub(crate) fn merge_weighted(
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
        counts: Option<Vec<usize>>,
        dim: usize,
    ) -> (Self, Vec<usize>) {
        let mut lookup: HashMap<Vec<u64>, usize> = HashMap::with_capacity(points.len());
        let mut out_points = Vec::new();
        let mut out_weights: Vec<f64> = Vec::new();
        let mut out_counts: Vec<usize> = Vec::new();
        let mut index = Vec::with_capacity(points.len());
        for (i, p) in points.into_iter().enumerate() {
            let key = bits_key(&p);
            let slot = *lookup.entry(key).or_insert_with(|| {
                out_points.push(p);
                out_weights.push(0.0);
                out_counts.push(0);
                out_points.len() - 1
            });
            out_weights[slot] += weights[i];
            if let Some(c) = &counts {
                out_counts[slot] += c[i];
            }
            index.push(slot);
        }
        let total: f64 = out_weights.iter().sum();
        if (total - 1.0).abs() > renorm_slack(out_weights.len()) {
            for w in &mut out_weights {
                *w /= total;
            }
        }
        (
            Self {
                points: out_points,
                weights: out_weights,
                dim,
                counts: counts.map(|_| out_counts),
            },
            index,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Number of source rows behind each support point, when known.
    pub fn counts(&self) -> Option<&[usize]> {
        self.counts.as_deref()
    }

    /// Row multiplicities for count-based operations. Falls back to one row
    /// per support point when the weights are uniform.
    pub fn row_counts(&self) -> Result<Vec<usize>> {
        if let Some(c) = &self.counts {
            return Ok(c.clone());
        }
        let w0 = self.weights[0];
        if self
            .weights
            .iter()
            .all(|w| (w - w0).abs() <= 1e-12 * w0.max(f64::MIN_POSITIVE))
        {
            Ok(vec![1; self.len()])
        } else {
            Err(Error::CountsRequired(
                "distribution has non-uniform explicit weights".into(),
            ))
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for (p, &w) in self.points.iter().zip(&self.weights) {
            for (m, x) in mu.iter_mut().zip(p) {
                *m += w * x;
            }
        }
        mu
    }

    /// The conditional law of `X` given `X ∈ {points[i] : i ∈ indices}`.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput);
        }
        let points = indices.iter().map(|&i| self.points[i].clone()).collect();
        let mass: f64 = indices.iter().map(|&i| self.weights[i]).sum();
        let weights = indices.iter().map(|&i| self.weights[i] / mass).collect();
        let counts = self
            .counts
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Ok(Self {
            points,
            weights,
            dim: self.dim,
            counts,
        })
    }
}

fn merge_counted(
    points: Vec<Vec<f64>>,
    counts: Vec<usize>,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>) {
    let mut lookup: HashMap<Vec<u64>, usize> = HashMap::with_capacity(points.len());
    let mut out_points = Vec::new();
    let mut out_counts: Vec<usize> = Vec::new();
    let mut index = Vec::with_capacity(points.len());
    for (p, c) in points.into_iter().zip(counts) {
        let slot = *lookup.entry(bits_key(&p)).or_insert_with(|| {
            out_points.push(p);
            out_counts.push(0);
            out_points.len() - 1
        });
        out_counts[slot] += c;
        index.push(slot);
    }
    (out_points, out_counts, index)
}

/// Largest row norm, or 1 when every row already lies in the unit ball.
pub fn unit_ball_scale(rows: &[Vec<f64>]) -> f64 {
    let max = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    if max > 1.0 {
        max
    } else {
        1.0
    }
}

/// Divides every row by the largest row norm (if above 1) and builds the
/// uniform distribution on the result. Returns the scale used.
pub fn rescale_to_unit_ball(rows: &[Vec<f64>]) -> Result<(EmpiricalDistribution, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scale = unit_ball_scale(rows);
    if !scale.is_finite() {
        return Err(Error::NonFinite { row: 0 });
    }
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| v / scale).collect())
        .collect();
    Ok((EmpiricalDistribution::from_rows(&scaled, None)?, scale))
}

/// Rounds every coordinate to the nearest multiple of `epsilon` and merges
/// points that collide.
pub fn snap_to_grid(dist: &EmpiricalDistribution, epsilon: f64) -> Result<EmpiricalDistribution> {
    snap_to_grid_indexed(dist, epsilon).map(|(d, _)| d)
}

/// [`snap_to_grid`] plus the map from old to new support indices.
pub fn snap_to_grid_indexed(
    dist: &EmpiricalDistribution,
    epsilon: f64,
) -> Result<(EmpiricalDistribution, Vec<usize>)> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "grid spacing must be positive, got {epsilon}"
        )));
    }
    let snapped: Vec<Vec<f64>> = dist
        .points
        .iter()
        .map(|p| {
            let mut q: Vec<f64> = p
                .iter()
                .map(|v| (v / epsilon).round() * epsilon + 0.0)
                .collect();
            let r = norm(&q);
            if r > 1.0 {
                // nearest point of the ball
                for v in &mut q {
                    *v /= r;
                }
            }
            q
        })
        .collect();
    Ok(EmpiricalDistribution::merge_weighted(
        snapped,
        dist.weights.clone(),
        dist.counts.clone(),
        dist.dim,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_default() {
        let d = EmpiricalDistribution::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]], None).unwrap();
        assert_eq!(d.weights(), &[0.5, 0.5]);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.counts(), Some(&[1, 1][..]));
    }

    #[test]
    fn duplicates_merge() {
        let d = EmpiricalDistribution::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]], None).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.weights(), &[1.0]);
        assert_eq!(d.counts(), Some(&[2][..]));
    }

    #[test]
    fn rejects_outside_ball() {
        let err = EmpiricalDistribution::from_rows(&[vec![2.0, 0.0]], None).unwrap_err();
        assert!(matches!(err, Error::NormExceeded { row: 0, .. }));
    }

    #[test]
    fn clamps_roundoff_norm() {
        let d = EmpiricalDistribution::from_rows(&[vec![1.0 + 5e-10, 0.0]], None).unwrap();
        assert!(norm(d.point(0)) <= 1.0 + NORM_SLACK);
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            EmpiricalDistribution::from_rows(&[], None).unwrap_err(),
            Error::EmptyInput
        );
        assert!(matches!(
            EmpiricalDistribution::from_rows(&[vec![0.1], vec![0.1, 0.2]], None),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(
            EmpiricalDistribution::from_rows(&[vec![0.1], vec![0.2]], Some(&[0.0, 0.0])),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            EmpiricalDistribution::from_rows(&[vec![0.1]], Some(&[-1.0])),
            Err(Error::InvalidWeights(_))
        ));
    }

    #[test]
    fn zero_weights_dropped_and_renormalized() {
        let (d, idx) = EmpiricalDistribution::from_rows_indexed(
            &[vec![0.1], vec![0.2], vec![0.3]],
            Some(&[2.0, 0.0, 6.0]),
        )
        .unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.weights(), &[0.25, 0.75]);
        assert_eq!(idx, vec![Some(0), None, Some(1)]);
        assert!(d.counts().is_none());
        assert!(d.row_counts().is_err());
    }

    #[test]
    fn rescale_examples() {
        let (d, s) = rescale_to_unit_ball(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(s, 5.0);
        assert_eq!(d.point(0), &[0.6, 0.8]);

        let (d, s) = rescale_to_unit_ball(&[vec![0.5, 0.0]]).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(d.point(0), &[0.5, 0.0]);

        let (d, s) = rescale_to_unit_ball(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(d.points(), &[vec![0.5, 0.0], vec![0.0, 1.0]]);

        assert_eq!(rescale_to_unit_ball(&[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn snap_examples() {
        let d = EmpiricalDistribution::from_rows(&[vec![0.123, 0.456]], None).unwrap();
        let s = snap_to_grid(&d, 0.1).unwrap();
        assert!((s.point(0)[0] - 0.1).abs() < 1e-15);
        assert!((s.point(0)[1] - 0.5).abs() < 1e-15);

        let d = EmpiricalDistribution::from_rows(&[vec![0.01, 0.0], vec![-0.01, 0.0]], None).unwrap();
        let s = snap_to_grid(&d, 0.1).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.point(0), &[0.0, 0.0]);
        assert_eq!(s.weights(), &[1.0]);
        assert_eq!(s.counts(), Some(&[2][..]));

        assert!(snap_to_grid(&d, 0.0).is_err());
    }

    #[test]
    fn snap_reprojects_into_ball() {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let d = EmpiricalDistribution::from_rows(&[vec![a, a]], None).unwrap();
        let s = snap_to_grid(&d, 0.5).unwrap();
        assert!(norm(s.point(0)) <= 1.0 + NORM_SLACK);
    }

    fn ball_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..5).prop_flat_map(|m| {
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, m), 1..30).prop_map(
                |rows| {
                    rows.into_iter()
                        .map(|r| {
                            let n = norm(&r).max(1.0);
                            r.into_iter().map(|v| v / n).collect()
                        })
                        .collect()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn construction_is_idempotent(rows in ball_rows(), seed_w in prop::collection::vec(0.0f64..3.0, 30)) {
            let w: Vec<f64> = seed_w[..rows.len()].iter().map(|v| v + 0.01).collect();
            for weights in [None, Some(&w[..])] {
                let d = EmpiricalDistribution::from_rows(&rows, weights).unwrap();
                let again = EmpiricalDistribution::from_rows(d.points(), Some(d.weights())).unwrap();
                prop_assert_eq!(d.points(), again.points());
                prop_assert_eq!(d.weights(), again.weights());
                let total: f64 = d.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn snapping_moves_little_and_never_grows(rows in ball_rows(), eps in 0.01f64..0.7) {
            let (d, _) = EmpiricalDistribution::from_rows_indexed(&rows, None).unwrap();
            let (s, map) = snap_to_grid_indexed(&d, eps).unwrap();
            prop_assert!(s.len() <= d.len());
            let bound = eps * (d.dim() as f64).sqrt() + 1e-12;
            for (i, &j) in map.iter().enumerate() {
                let dist: f64 = d.point(i).iter().zip(s.point(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(dist <= bound, "moved {} > {}", dist, bound);
            }
            let total: f64 = s.weights().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for p in s.points() {
                prop_assert!(norm(p) <= 1.0 + NORM_SLACK);
            }
        }
    }
}
