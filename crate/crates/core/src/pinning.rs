//! Partitioning Boolean data by pinning a random set of coordinates.
//!
//! For `X` valued in `{±1}^m/√m`, draw `t` uniformly from `{0, …, ℓ}` with
//! `ℓ = ⌊log₂ k⌋`, draw a uniform `t`-subset `S` of the coordinates and split
//! the support by the sign pattern of `X_S`. That gives at most `2^t ≤ k`
//! cells, an expected loss of at most `3/√ℓ`, and a loss below `9/√ℓ` with
//! probability at least 2/3. Attempts whose loss misses the `9/√ℓ` threshold
//! are redrawn, up to `max_retries` times.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::weighted_covariance;
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::partition::{covariance_loss, loss_for_labels, CovarianceReport, Partition};

/// Per-coordinate slack when checking membership in `{±1/√m}^m`.
pub const BOOLEAN_TOLERANCE: f64 = 1e-12;
/// Largest number of `(t, S)` pairs enumerated exactly.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;
/// Fewest draws accepted for a sampled audit.
pub const MIN_AUDIT_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinningConfig {
    pub k: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl PinningConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_retries: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::InvalidParameter(format!("k must be at least 3, got {}", self.k)));
        }
        if self.max_retries < 1 {
            return Err(Error::InvalidParameter("max_retries must be at least 1".into()));
        }
        Ok(())
    }

    /// `ℓ = ⌊log₂ k⌋`, the largest pinning set size.
    pub fn levels(&self) -> usize {
        levels(self.k)
    }

    /// Acceptance threshold `9/√ℓ`.
    pub fn threshold(&self) -> f64 {
        9.0 / (self.levels() as f64).sqrt()
    }

    /// Bound `3/√ℓ` on the expected loss.
    pub fn expectation_bound(&self) -> f64 {
        3.0 / (self.levels() as f64).sqrt()
    }
}

pub(crate) fn levels(k: usize) -> usize {
    (usize::BITS - 1 - k.leading_zeros()) as usize
}

/// Result of [`pin_partition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinningOutcome {
    pub partition: Partition,
    pub report: CovarianceReport,
    /// Size of the pinned set of the returned attempt.
    pub t: usize,
    /// Pinned coordinates, ascending.
    #[serde(rename = "S")]
    pub pinned: Vec<usize>,
    pub attempts: usize,
    pub accepted: bool,
    pub threshold: f64,
}

/// Fails unless every support point lies on `{±1/√m}^m`.
pub fn check_boolean(dist: &EmpiricalDistribution) -> Result<()> {
    let level = 1.0 / (dist.dim() as f64).sqrt();
    for (row, p) in dist.points().iter().enumerate() {
        if let Some(coord) = p
            .iter()
            .position(|v| (v.abs() - level).abs() > BOOLEAN_TOLERANCE)
        {
            return Err(Error::NotBoolean { row, coord });
        }
    }
    Ok(())
}

/// Sign-pattern key of a point on the coordinates in `subset`.
fn pattern(point: &[f64], subset: &[usize]) -> u64 {
    subset
        .iter()
        .enumerate()
        .fold(0u64, |acc, (bit, &c)| acc | (u64::from(point[c] > 0.0) << bit))
}

fn pattern_labels(dist: &EmpiricalDistribution, subset: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let labels = dist
        .points()
        .iter()
        .map(|p| {
            let next = ids.len();
            *ids.entry(pattern(p, subset)).or_insert(next)
        })
        .collect();
    (labels, ids.len())
}

/// Cells of the support that agree on the signs of the coordinates in `subset`.
pub fn pattern_partition(
    dist: &EmpiricalDistribution,
    subset: &[usize],
    k_budget: usize,
) -> Result<Partition> {
    if let Some(&c) = subset.iter().find(|&&c| c >= dist.dim()) {
        return Err(Error::InvalidParameter(format!(
            "coordinate {c} out of range for dimension {}",
            dist.dim()
        )));
    }
    if subset.len() > 63 {
        return Err(Error::InvalidParameter("at most 63 pinned coordinates".into()));
    }
    Partition::new(pattern_labels(dist, subset).0, k_budget)
}

/// One `(t, S)` draw; attempt `a` uses ChaCha stream `a` of `seed`.
pub fn draw_pinning_set(seed: u64, attempt: u64, m: usize, levels: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let t = rng.random_range(0..=levels.min(m));
    let mut s = index::sample(&mut rng, m, t).into_vec();
    s.sort_unstable();
    s
}

/// Partitions Boolean data by the signs of a random coordinate subset,
/// redrawing until the loss is at most `9/√ℓ`. Supports with at most `k`
/// points (in particular when `m ≤ ℓ`) get the discrete partition.
pub fn pin_partition(dist: &EmpiricalDistribution, cfg: &PinningConfig) -> Result<PinningOutcome> {
    cfg.validate()?;
    check_boolean(dist)?;
    let m = dist.dim();
    let ell = cfg.levels();
    let threshold = cfg.threshold();
    if m <= ell || dist.len() <= cfg.k {
        // at most k support points: pinning every coordinate separates them
        let partition = Partition::discrete(dist.len()).with_budget(cfg.k)?;
        let report = covariance_loss(dist, &partition, &[])?;
        return Ok(PinningOutcome {
            partition,
            report,
            t: m,
            pinned: (0..m).collect(),
            attempts: 1,
            accepted: true,
            threshold,
        });
    }

    let mut best: Option<PinningOutcome> = None;
    let mut made = 0;
    for attempt in 0..cfg.max_retries {
        made = attempt + 1;
        let pinned = draw_pinning_set(cfg.seed, attempt as u64, m, ell);
        let partition = pattern_partition(dist, &pinned, cfg.k)?;
        let report = covariance_loss(dist, &partition, &[])?;
        let accepted = report.loss_frobenius <= threshold;
        let better = best
            .as_ref()
            .is_none_or(|b| report.loss_frobenius < b.report.loss_frobenius);
        if accepted || better {
            best = Some(PinningOutcome {
                partition,
                report,
                t: pinned.len(),
                pinned,
                attempts: made,
                accepted,
                threshold,
            });
        }
        if accepted {
            break;
        }
    }
    let mut out = best.expect("max_retries >= 1");
    out.attempts = made;
    Ok(out)
}

fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Lexicographic `t`-subsets of `0..m`.
pub(crate) fn subsets(m: usize, t: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut next = if t <= m { Some((0..t).collect::<Vec<_>>()) } else { None };
    std::iter::from_fn(move || {
        let current = next.take()?;
        let mut s = current.clone();
        let mut i = t;
        while i > 0 {
            i -= 1;
            if s[i] < m - t + i {
                s[i] += 1;
                for j in i + 1..t {
                    s[j] = s[j - 1] + 1;
                }
                next = Some(s);
                break;
            }
        }
        Some(current)
    })
}

fn enumeration_size(m: usize, levels: usize) -> u128 {
    (0..=levels.min(m)).map(|t| binomial(m, t)).sum()
}

/// Average of `f(S)` over `t` uniform in `{0, …, levels}` and `S` uniform
/// among `t`-subsets, by full enumeration.
fn enumerate_average(m: usize, levels: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<f64> {
    let needed = enumeration_size(m, levels);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    let top = levels.min(m);
    let mut total = 0.0;
    for t in 0..=top {
        let count = binomial(m, t) as f64;
        let sum: f64 = subsets(m, t).map(|s| f(&s)).sum();
        total += sum / count;
    }
    Ok(total / (top + 1) as f64)
}

/// Exact `E_{t,S}‖Σ_X − Σ_Y‖_F` for the pinning scheme with budget `k`,
/// mirroring [`pin_partition`] (zero when `m ≤ ⌊log₂ k⌋` or the support
/// has at most `k` points).
pub fn exact_expected_loss(dist: &EmpiricalDistribution, k: usize) -> Result<f64> {
    PinningConfig::new(k, 0).validate()?;
    check_boolean(dist)?;
    let m = dist.dim();
    let ell = levels(k);
    if m <= ell || dist.len() <= k {
        return Ok(0.0);
    }
    enumerate_average(m, ell, |s| {
        let (labels, cells) = pattern_labels(dist, s);
        loss_for_labels(dist, &labels, cells)
    })
}

/// Monte Carlo settings for audits too large to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditSampling {
    pub seed: u64,
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinningAudit {
    /// `E_t E_S E_{X_S} Σ_{i≠j} Cov(X_i, X_j | X_S)²` on the ±1 variables.
    pub value: f64,
    /// `8 m² ln 2 / ℓ`.
    pub bound: f64,
    pub levels: usize,
    pub exact: bool,
}

/// Off-diagonal conditional covariance mass of the ±1 variables given the
/// signs on `subset`, averaged over the sign patterns.
fn conditional_offdiagonal(dist: &EmpiricalDistribution, subset: &[usize]) -> f64 {
    let m = dist.dim();
    let scale = (m as f64).sqrt();
    let (labels, cells) = pattern_labels(dist, subset);
    let mut groups: Vec<(Vec<Vec<f64>>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); cells];
    for (i, &l) in labels.iter().enumerate() {
        groups[l]
            .0
            .push(dist.point(i).iter().map(|v| v * scale).collect());
        groups[l].1.push(dist.weight(i));
    }
    groups
        .into_iter()
        .map(|(pts, ws)| {
            let mass: f64 = ws.iter().sum();
            let cond: Vec<f64> = ws.iter().map(|w| w / mass).collect();
            let cov = weighted_covariance(&pts, &cond, m);
            let mut off = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        off += cov[(i, j)] * cov[(i, j)];
                    }
                }
            }
            mass * off
        })
        .sum()
}

/// Left-hand side of the pinning inequality with `ℓ = ⌊log₂ k⌋`, on the
/// unnormalized ±1 coordinates. Enumerates every `(t, S)` when affordable,
/// otherwise samples if `sampling` is given.
pub fn pinning_expectation_audit(
    dist: &EmpiricalDistribution,
    k: usize,
    sampling: Option<AuditSampling>,
) -> Result<PinningAudit> {
    check_boolean(dist)?;
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k must be at least 2, got {k}")));
    }
    let m = dist.dim();
    let ell = levels(k);
    let bound = 8.0 * (m * m) as f64 * std::f64::consts::LN_2 / ell as f64;
    match enumerate_average(m, ell, |s| conditional_offdiagonal(dist, s)) {
        Ok(value) => Ok(PinningAudit {
            value,
            bound,
            levels: ell,
            exact: true,
        }),
        Err(Error::EnumerationBudget { needed, budget }) => {
            let Some(sampling) = sampling else {
                return Err(Error::EnumerationBudget { needed, budget });
            };
            let draws = sampling.draws.max(MIN_AUDIT_DRAWS);
            let total: f64 = (0..draws)
                .map(|a| conditional_offdiagonal(dist, &draw_pinning_set(sampling.seed, a as u64, m, ell)))
                .sum();
            Ok(PinningAudit {
                value: total / draws as f64,
                bound,
                levels: ell,
                exact: false,
            })
        }
        Err(e) => Err(e),
    }
}
