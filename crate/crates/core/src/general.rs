//! Partitioning arbitrary data in the unit ball.
//!
//! The pipeline:
//!
//! 1. Project onto the top-`p` eigenvectors of `E[XXᵀ]`; cells are later
//!    pulled back through the fibers of the projection.
//! 2. Give every heavy point (mass `≥ 3/k`) its own cell.
//! 3. Grid the remaining points into cubes of side `γ`.
//! 4. A cube with little mass (`≤ k^{-1/2}`) becomes a single cell.
//! 5. Points of a heavier cube are rounded at random to the corners of the
//!    inflated cube `x₀ + {±3γ/2}^p`, independently per coordinate with mean
//!    `x`, and points sharing a corner share a cell.
//!
//! With the asymptotic constants (`p = c log k`, `γ = e^{-1/(4c)}/√(c log k)`)
//! the construction degenerates at any practical `k`, so by default a
//! practical parameterization is used; see [`GeneralConfig`].

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{symmetric_eigen, weighted_covariance, weighted_second_moment};
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};
use crate::partition::{conditional_expectation, covariance_loss, CovarianceReport, Partition};

/// Largest `p` for which [`idealized_moments`] enumerates all corners.
pub const MAX_IDEALIZED_DIM: usize = 20;
/// Largest `p` audited per cube during [`build_partition`].
pub const MAX_AUDIT_DIM: usize = 12;
const MAX_PRACTICAL_DIM: usize = 12;
const OUTSIDE_CUBE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralConfig {
    pub k: usize,
    /// Constant in `p = c log k`; must lie in `(0, 1/120)`.
    pub c: f64,
    pub seed: u64,
    /// Use `p = max(1, ⌊log₂k / 2⌋)` (at most 12) and `γ = 1/√(p log k)`
    /// instead of the asymptotic constants, and coarsen the grid whenever
    /// the cluster budget would overflow.
    pub practical_mode: bool,
    pub heavy_threshold_override: Option<f64>,
    pub case1_threshold_override: Option<f64>,
    /// Record per-cube rounding audits in the diagnostics.
    pub audit: bool,
}

impl GeneralConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            c: 1.0 / 121.0,
            seed,
            practical_mode: true,
            heavy_threshold_override: None,
            case1_threshold_override: None,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::InvalidParameter(format!("k must be at least 3, got {}", self.k)));
        }
        if !(self.c > 0.0 && self.c < 1.0 / 120.0) {
            return Err(Error::InvalidParameter(format!(
                "c must lie in (0, 1/120), got {}",
                self.c
            )));
        }
        for (name, v) in [
            ("heavy threshold", self.heavy_threshold_override),
            ("case I threshold", self.case1_threshold_override),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidParameter(format!("{name} must be positive")));
                }
            }
        }
        Ok(())
    }

    fn ln_k(&self) -> f64 {
        (self.k as f64).ln()
    }

    /// Reduced dimension before clamping to the data dimension.
    pub fn target_dim(&self) -> usize {
        if self.practical_mode {
            (crate::pinning::levels(self.k) / 2).clamp(1, MAX_PRACTICAL_DIM)
        } else {
            ((self.c * self.ln_k()).floor() as usize).max(1)
        }
    }

    /// Cube side for reduced dimension `p`.
    pub fn gamma(&self, p: usize) -> f64 {
        if self.practical_mode {
            1.0 / (p as f64 * self.ln_k()).sqrt()
        } else {
            (-1.0 / (4.0 * self.c)).exp() / (self.c * self.ln_k()).sqrt()
        }
    }

    pub fn heavy_threshold(&self) -> f64 {
        self.heavy_threshold_override
            .unwrap_or(3.0 / self.k as f64)
    }

    pub fn case1_threshold(&self) -> f64 {
        self.case1_threshold_override
            .unwrap_or((self.k as f64).powf(-0.5))
    }

    /// Largest conditional point mass inside a rounded cube, `k^{-1/3}`.
    pub fn weight_bound(&self) -> f64 {
        (self.k as f64).powf(-1.0 / 3.0)
    }
}

/// Maps support points of `X` to support points of `PX`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiberMap {
    support_to_projected: Vec<usize>,
    projected_len: usize,
}

impl FiberMap {
    pub fn projected_index(&self, i: usize) -> usize {
        self.support_to_projected[i]
    }

    /// A partition of the projected support, read as a partition of the
    /// original support (every fiber stays inside one cell).
    pub fn pull_back(&self, part: &Partition) -> Result<Partition> {
        if part.len() != self.projected_len {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} projected points",
                part.len(),
                self.projected_len
            )));
        }
        let labels = self
            .support_to_projected
            .iter()
            .map(|&j| part.label(j))
            .collect();
        Partition::new(labels, part.k_budget())
    }

    /// The partition of the original support into fibers, i.e. the cells of
    /// `E[X | PX]`.
    pub fn fiber_partition(&self) -> Partition {
        Partition::new(self.support_to_projected.clone(), self.projected_len.max(1))
            .expect("fiber count is the budget")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaReduction {
    /// Law of `PX` in the coordinates of the retained eigenvectors.
    pub projected: EmpiricalDistribution,
    pub fibers: FiberMap,
    /// Retained eigenvectors of `E[XXᵀ]`, one per row.
    pub basis: Vec<Vec<f64>>,
    /// All eigenvalues of `E[XXᵀ]`, descending.
    pub eigenvalues: Vec<f64>,
    /// `‖(I − P) E[XXᵀ] (I − P)‖_F`.
    pub measured_tail: f64,
}

/// Sorted eigenpairs of a symmetric matrix: eigenvalues descending, ties
/// broken by the lexicographically largest eigenvector, each vector signed
/// so its first nonzero coordinate is positive.
fn sorted_eigenpairs(m: &DMatrix<f64>) -> Result<Vec<(f64, Vec<f64>)>> {
    let eig = symmetric_eigen(m)?;
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            (l, v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let scale = pairs.first().map_or(1.0, |p| p.0.abs().max(1.0));
    let tie = 1e-12 * scale;
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= tie {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| {
            b.1.iter()
                .zip(&a.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        start = end;
    }
    Ok(pairs)
}

/// Projects onto the top-`t` eigenspace of `E[XXᵀ]`.
pub fn pca_reduce(dist: &EmpiricalDistribution, t: usize) -> Result<PcaReduction> {
    let m = dist.dim();
    if t == 0 || t > m {
        return Err(Error::InvalidParameter(format!(
            "reduced dimension must be in 1..={m}, got {t}"
        )));
    }
    let s = weighted_second_moment(dist.points(), dist.weights(), m);
    let pairs = sorted_eigenpairs(&s)?;
    let basis: Vec<Vec<f64>> = pairs[..t].iter().map(|(_, v)| v.clone()).collect();
    let eigenvalues = pairs.iter().map(|p| p.0).collect();

    let mut complement = DMatrix::<f64>::identity(m, m);
    for v in &basis {
        for i in 0..m {
            for j in 0..m {
                complement[(i, j)] -= v[i] * v[j];
            }
        }
    }
    let tail = &complement * &s * &complement;
    let measured_tail = tail.iter().map(|x| x * x).sum::<f64>().sqrt();

    let projected_points: Vec<Vec<f64>> = dist
        .points()
        .iter()
        .map(|x| {
            basis
                .iter()
                .map(|v| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + 0.0)
                .collect()
        })
        .collect();
    let (projected, index) = EmpiricalDistribution::merge_weighted(
        projected_points,
        dist.weights().to_vec(),
        dist.counts().map(<[usize]>::to_vec),
        t,
    );
    Ok(PcaReduction {
        fibers: FiberMap {
            support_to_projected: index,
            projected_len: projected.len(),
        },
        projected,
        basis,
        eigenvalues,
        measured_tail,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeavySplit {
    pub heavy: Vec<usize>,
    pub light: Vec<usize>,
}

/// Points of mass at least `3/k` are heavy.
pub fn split_heavy(dist: &EmpiricalDistribution, k: usize) -> HeavySplit {
    split_heavy_at(dist, 3.0 / k as f64)
}

/// Threshold is inclusive, with a relative slack of `1e-12` for round-off.
pub fn split_heavy_at(dist: &EmpiricalDistribution, threshold: f64) -> HeavySplit {
    let cut = threshold * (1.0 - 1e-12);
    let (heavy, light) = (0..dist.len()).partition(|&i| dist.weight(i) >= cut);
    HeavySplit { heavy, light }
}

/// A grid cube `x₀ + [−γ/2, γ/2)^p` and the support points inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeCell {
    /// Grid index `j`: the cube is `Π [j_i γ, (j_i + 1) γ)`.
    pub key: Vec<i64>,
    /// Cube center.
    pub anchor: Vec<f64>,
    pub side: f64,
    pub members: Vec<usize>,
    /// Unnormalized mass of the members.
    pub mass: f64,
}

fn check_grid(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "cube side must be positive, got {gamma}"
        )));
    }
    if 2.0 / gamma > 2f64.powi(52) {
        return Err(Error::InvalidParameter(format!(
            "cube side {gamma} is too small for exact grid indices"
        )));
    }
    Ok(())
}

/// Assigns the points `members` of `dist` to origin-anchored grid cubes of
/// side `gamma`. Cubes are returned sorted by grid index.
pub fn decompose_cubes(
    dist: &EmpiricalDistribution,
    members: &[usize],
    gamma: f64,
) -> Result<Vec<CubeCell>> {
    check_grid(gamma)?;
    let mut cubes: BTreeMap<Vec<i64>, (Vec<usize>, f64)> = BTreeMap::new();
    for &i in members {
        let key: Vec<i64> = dist
            .point(i)
            .iter()
            .map(|x| (x / gamma).floor() as i64)
            .collect();
        let entry = cubes.entry(key).or_default();
        entry.0.push(i);
        entry.1 += dist.weight(i);
    }
    Ok(cubes
        .into_iter()
        .map(|(key, (members, mass))| CubeCell {
            anchor: key.iter().map(|&j| (j as f64 + 0.5) * gamma).collect(),
            key,
            side: gamma,
            members,
            mass,
        })
        .collect())
}

/// Indices of light (Case I) and dense (Case II) cubes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeClasses {
    pub case1: Vec<usize>,
    pub case2: Vec<usize>,
}

/// Case I when the cube mass is at most `k^{-1/2}`.
pub fn classify_cubes(cells: &[CubeCell], k: usize) -> CubeClasses {
    classify_cubes_at(cells, (k as f64).powf(-0.5))
}

pub fn classify_cubes_at(cells: &[CubeCell], threshold: f64) -> CubeClasses {
    let (case1, case2) = (0..cells.len()).partition(|&c| cells[c].mass <= threshold);
    CubeClasses { case1, case2 }
}

/// Randomized rounding of a cube's points to the corners `x₀ + {±3γ/2}^p`.
///
/// Coordinate `i` of a point `x` rounds up with probability
/// `(x_i − x₀_i + 3γ/2)/(3γ)`, independently across coordinates, so the
/// rounded corner has mean `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingScheme {
    anchor: Vec<f64>,
    gamma: f64,
}

impl RoundingScheme {
    pub fn new(anchor: Vec<f64>, gamma: f64) -> Self {
        Self { anchor, gamma }
    }

    pub fn for_cube(cell: &CubeCell) -> Self {
        Self::new(cell.anchor.clone(), cell.side)
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// Probability that each coordinate of `x` rounds to the `+` side. In
    /// `[1/3, 2/3]` for points inside the cube.
    pub fn plus_probabilities(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.anchor)
            .map(|(xi, ai)| ((xi - ai + 1.5 * self.gamma) / (3.0 * self.gamma)).clamp(1.0 / 3.0, 2.0 / 3.0))
            .collect()
    }

    /// Corner for a sign pattern; bit `i` set means `+` in coordinate `i`.
    pub fn corner(&self, pattern: u64) -> Vec<f64> {
        self.anchor
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if pattern >> i & 1 == 1 {
                    a + 1.5 * self.gamma
                } else {
                    a - 1.5 * self.gamma
                }
            })
            .collect()
    }

    /// `P[w_x = corner(pattern)]`.
    pub fn corner_probability(&self, x: &[f64], pattern: u64) -> f64 {
        self.plus_probabilities(x)
            .iter()
            .enumerate()
            .map(|(i, &q)| if pattern >> i & 1 == 1 { q } else { 1.0 - q })
            .product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> u64 {
        self.plus_probabilities(x)
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &q)| {
                acc | (u64::from(rng.random::<f64>() < q) << i)
            })
    }
}

fn check_inside(cell: &CubeCell, dist: &EmpiricalDistribution) -> Result<()> {
    let half = cell.side / 2.0;
    for &i in &cell.members {
        let excess = dist
            .point(i)
            .iter()
            .zip(&cell.anchor)
            .map(|(x, a)| (x - a).abs() - half)
            .fold(f64::NEG_INFINITY, f64::max);
        if excess > OUTSIDE_CUBE_SLACK {
            return Err(Error::OutsideCube { row: i, excess });
        }
    }
    Ok(())
}

/// Rounds every member of `cell` to a corner and groups members by corner.
/// Returns a partition of `cell.members` (in member order) and the corner
/// pattern of each resulting cell.
pub fn round_cube<R: Rng + ?Sized>(
    cell: &CubeCell,
    dist: &EmpiricalDistribution,
    rng: &mut R,
) -> Result<(Partition, Vec<u64>)> {
    check_inside(cell, dist)?;
    let p = cell.anchor.len();
    if p > 63 {
        return Err(Error::InvalidParameter("at most 63 rounded coordinates".into()));
    }
    let scheme = RoundingScheme::for_cube(cell);
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut patterns = Vec::new();
    let labels = cell
        .members
        .iter()
        .map(|&i| {
            let w = scheme.sample(dist.point(i), rng);
            *ids.entry(w).or_insert_with(|| {
                patterns.push(w);
                patterns.len() - 1
            })
        })
        .collect();
    let budget = 1usize << p.min(usize::BITS as usize - 1);
    Ok((Partition::new(labels, budget)?, patterns))
}

/// One corner of the idealized rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealCorner {
    pub pattern: u64,
    /// `q_w = Σ_x P[w_x = w] P[X = x]`.
    pub q: f64,
    /// `z_w`, the `q_w`-normalized average of the points rounding to `w`.
    pub z: Vec<f64>,
}

/// The idealized conditional expectation `Z` of a cube: the law averaging
/// over the rounding randomness instead of sampling it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealizedRounding {
    pub dim: usize,
    pub corners: Vec<IdealCorner>,
}

impl IdealizedRounding {
    pub fn total_mass(&self) -> f64 {
        self.corners.iter().map(|c| c.q).sum()
    }

    pub fn min_mass(&self) -> f64 {
        self.corners.iter().map(|c| c.q).fold(f64::INFINITY, f64::min)
    }

    fn law(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.corners.iter().map(|c| (c.z.clone(), c.q)).unzip()
    }

    /// `E[ZZᵀ]`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let (z, q) = self.law();
        weighted_second_moment(&z, &q, self.dim)
    }

    /// `Σ_Z`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let (z, q) = self.law();
        weighted_covariance(&z, &q, self.dim)
    }
}

/// Exact `q_w`, `z_w` over all `2^p` corners for the conditional law of
/// `X` on the cube.
pub fn idealized_moments(
    cell: &CubeCell,
    dist: &EmpiricalDistribution,
) -> Result<IdealizedRounding> {
    let p = cell.anchor.len();
    if p > MAX_IDEALIZED_DIM {
        return Err(Error::EnumerationBudget {
            needed: 1u128 << p,
            budget: 1u128 << MAX_IDEALIZED_DIM,
        });
    }
    check_inside(cell, dist)?;
    let scheme = RoundingScheme::for_cube(cell);
    let mass = cell.mass;
    let probs: Vec<(Vec<f64>, f64, &[f64])> = cell
        .members
        .iter()
        .map(|&i| {
            let x = dist.point(i);
            (scheme.plus_probabilities(x), dist.weight(i) / mass, x)
        })
        .collect();
    let corners = (0..1u64 << p)
        .map(|pattern| {
            let mut q = 0.0;
            let mut z = vec![0.0; p];
            for (plus, w, x) in &probs {
                let mu = w * plus
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| if pattern >> i & 1 == 1 { r } else { 1.0 - r })
                    .product::<f64>();
                q += mu;
                for (zi, xi) in z.iter_mut().zip(x.iter()) {
                    *zi += mu * xi;
                }
            }
            z.iter_mut().for_each(|v| *v /= q);
            IdealCorner { pattern, q, z }
        })
        .collect();
    Ok(IdealizedRounding { dim: p, corners })
}

/// Rounding audit of one dense cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeAudit {
    pub cube: usize,
    pub mass: f64,
    /// `‖E[X_C X_Cᵀ] − E[ZZᵀ]‖_F` for the conditional law `X_C` on the cube.
    pub idealized_raw_gap: f64,
    /// `‖Σ_{X_C} − Σ_Z‖_F`.
    pub idealized_centered_gap: f64,
    /// `36 γ² √p`.
    pub idealized_bound: f64,
    pub min_corner_mass: f64,
    /// `3^{-p}`.
    pub corner_mass_floor: f64,
    /// `‖E[X_C X_Cᵀ] − E[Y_C Y_Cᵀ]‖_F` for the realized rounding.
    pub realized_gap: f64,
    /// `36 γ² √p + k^{-1/48}`.
    pub realized_bound: f64,
    pub max_conditional_weight: f64,
}

/// Compares the idealized rounding of a cube with its conditional law.
pub fn audit_cube(cell: &CubeCell, dist: &EmpiricalDistribution) -> Result<(IdealizedRounding, f64, f64)> {
    let ideal = idealized_moments(cell, dist)?;
    let cond = dist.restrict(&cell.members)?;
    let p = ideal.dim;
    let raw = weighted_second_moment(cond.points(), cond.weights(), p) - ideal.second_moment();
    let centered = weighted_covariance(cond.points(), cond.weights(), p) - ideal.covariance();
    let norm = |m: DMatrix<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((ideal, norm(raw), norm(centered)))
}

/// Outcome of [`build_partition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralOutcome {
    pub partition: Partition,
    pub report: CovarianceReport,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub practical_mode: bool,
    /// Set when the pipeline was bypassed: `"support"` when the support fits
    /// in the budget, `"projected_support"` when the projected support does.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shortcut: Option<String>,
    pub budget_k: usize,
    pub pca_dims: usize,
    pub pca_tail: f64,
    /// `1/√t`.
    pub pca_tail_bound: f64,
    pub projected_support: usize,
    pub heavy_threshold: f64,
    pub case1_threshold: f64,
    pub heavy: usize,
    pub gamma_initial: f64,
    pub gamma: f64,
    pub gamma_doublings: usize,
    pub cubes_case1: usize,
    pub cubes_case2: usize,
    pub case2_clusters: usize,
    pub forced_merges: usize,
    pub clusters_emitted: usize,
    pub weight_bound: f64,
    /// Points whose conditional mass in a dense cube exceeds `k^{-1/3}`.
    pub weight_bound_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cube_audits: Option<Vec<CubeAudit>>,
}

struct LightClustering {
    labels: Vec<Option<usize>>,
    clusters: usize,
    cubes_case1: usize,
    cubes_case2: usize,
    case2_clusters: usize,
    violations: usize,
    audits: Vec<CubeAudit>,
}

fn cluster_light(
    projected: &EmpiricalDistribution,
    light: &[usize],
    gamma: f64,
    cfg: &GeneralConfig,
) -> Result<LightClustering> {
    let cubes = decompose_cubes(projected, light, gamma)?;
    let classes = classify_cubes_at(&cubes, cfg.case1_threshold());
    let mut labels = vec![None; projected.len()];
    let mut clusters = 0;
    for &c in &classes.case1 {
        for &i in &cubes[c].members {
            labels[i] = Some(clusters);
        }
        clusters += 1;
    }
    let weight_bound = cfg.weight_bound();
    let p = projected.dim();
    let mut case2_clusters = 0;
    let mut violations = 0;
    let mut audits = Vec::new();
    for &c in &classes.case2 {
        let cube = &cubes[c];
        violations += cube
            .members
            .iter()
            .filter(|&&i| projected.weight(i) / cube.mass > weight_bound)
            .count();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let (part, _) = round_cube(cube, projected, &mut rng)?;
        for (slot, &i) in cube.members.iter().enumerate() {
            labels[i] = Some(clusters + part.label(slot));
        }
        clusters += part.cell_count();
        case2_clusters += part.cell_count();
        if cfg.audit && p <= MAX_AUDIT_DIM {
            audits.push(cube_audit(c, cube, projected, &part, cfg)?);
        }
    }
    Ok(LightClustering {
        labels,
        clusters,
        cubes_case1: classes.case1.len(),
        cubes_case2: classes.case2.len(),
        case2_clusters,
        violations,
        audits,
    })
}

fn cube_audit(
    index: usize,
    cube: &CubeCell,
    projected: &EmpiricalDistribution,
    part: &Partition,
    cfg: &GeneralConfig,
) -> Result<CubeAudit> {
    let (ideal, raw, centered) = audit_cube(cube, projected)?;
    let cond = projected.restrict(&cube.members)?;
    let realized = covariance_loss(&cond, part, &[])?.loss_raw_moment;
    let p = ideal.dim as f64;
    let idealized_bound = 36.0 * cube.side * cube.side * p.sqrt();
    Ok(CubeAudit {
        cube: index,
        mass: cube.mass,
        idealized_raw_gap: raw,
        idealized_centered_gap: centered,
        idealized_bound,
        min_corner_mass: ideal.min_mass(),
        corner_mass_floor: 3f64.powf(-p),
        realized_gap: realized,
        realized_bound: idealized_bound + (cfg.k as f64).powf(-1.0 / 48.0),
        max_conditional_weight: cond.weights().iter().copied().fold(0.0, f64::max),
    })
}

/// Merges light clusters (smallest mass first, into the nearest mean, lowest
/// index on ties) until at most `target` remain. Returns the merge count.
fn merge_down(
    projected: &EmpiricalDistribution,
    labels: &mut [Option<usize>],
    clusters: usize,
    target: usize,
) -> usize {
    let dim = projected.dim();
    let mut mass = vec![0.0; clusters];
    let mut sums = vec![vec![0.0; dim]; clusters];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            mass[l] += projected.weight(i);
            for (s, x) in sums[l].iter_mut().zip(projected.point(i)) {
                *s += projected.weight(i) * x;
            }
        }
    }
    let mut owner: Vec<usize> = (0..clusters).collect();
    let mut alive: Vec<usize> = (0..clusters).collect();
    let mut merges = 0;
    while alive.len() > target.max(1) {
        let (pos, &small) = alive
            .iter()
            .enumerate()
            .min_by(|a, b| mass[*a.1].total_cmp(&mass[*b.1]).then(a.1.cmp(b.1)))
            .expect("nonempty");
        let from: Vec<f64> = sums[small].iter().map(|v| v / mass[small]).collect();
        let mut best = f64::INFINITY;
        let mut into = usize::MAX;
        for &c in &alive {
            if c == small {
                continue;
            }
            let d: f64 = sums[c]
                .iter()
                .zip(&from)
                .map(|(s, f)| (s / mass[c] - f).powi(2))
                .sum();
            if d < best {
                best = d;
                into = c;
            }
        }
        alive.remove(pos);
        mass[into] += mass[small];
        let moved = std::mem::take(&mut sums[small]);
        for (s, v) in sums[into].iter_mut().zip(moved) {
            *s += v;
        }
        owner.iter_mut().filter(|o| **o == small).for_each(|o| *o = into);
        merges += 1;
    }
    for l in labels.iter_mut().flatten() {
        *l = owner[*l];
    }
    merges
}

/// Builds a partition of the support of `dist` into at most `cfg.k` cells.
pub fn build_partition(dist: &EmpiricalDistribution, cfg: &GeneralConfig) -> Result<GeneralOutcome> {
    cfg.validate()?;
    let k = cfg.k;
    let mut diag = Diagnostics {
        practical_mode: cfg.practical_mode,
        budget_k: k,
        heavy_threshold: cfg.heavy_threshold(),
        case1_threshold: cfg.case1_threshold(),
        weight_bound: cfg.weight_bound(),
        ..Diagnostics::default()
    };
    if dist.len() <= k {
        let partition = Partition::discrete(dist.len()).with_budget(k)?;
        diag.shortcut = Some("support".into());
        diag.clusters_emitted = partition.cell_count();
        let report = covariance_loss(dist, &partition, &[])?;
        return Ok(GeneralOutcome {
            partition,
            report,
            diagnostics: diag,
        });
    }

    let t = cfg.target_dim().min(dist.dim());
    let pca = pca_reduce(dist, t)?;
    let projected = &pca.projected;
    diag.pca_dims = t;
    diag.pca_tail = pca.measured_tail;
    diag.pca_tail_bound = 1.0 / (t as f64).sqrt();
    diag.projected_support = projected.len();

    let projected_labels: Vec<usize> = if projected.len() <= k {
        diag.shortcut = Some("projected_support".into());
        (0..projected.len()).collect()
    } else {
        let split = split_heavy_at(projected, cfg.heavy_threshold());
        diag.heavy = split.heavy.len();
        let budget = k.saturating_sub(split.heavy.len());
        let mut gamma = cfg.gamma(t);
        diag.gamma_initial = gamma;
        let mut light = cluster_light(projected, &split.light, gamma, cfg)?;
        if cfg.practical_mode {
            // coarsen until every light point shares one of 2^p cubes
            while light.clusters > budget && gamma < 4.0 {
                gamma *= 2.0;
                diag.gamma_doublings += 1;
                light = cluster_light(projected, &split.light, gamma, cfg)?;
            }
            if light.clusters > budget {
                diag.forced_merges =
                    merge_down(projected, &mut light.labels, light.clusters, budget);
            }
        }
        diag.gamma = gamma;
        diag.cubes_case1 = light.cubes_case1;
        diag.cubes_case2 = light.cubes_case2;
        diag.case2_clusters = light.case2_clusters;
        diag.weight_bound_violations = light.violations;
        if cfg.audit {
            diag.cube_audits = Some(light.audits);
        }
        if light.violations > 0 {
            log::warn!(
                "{} points exceed the conditional mass bound {:.4} inside dense cubes",
                light.violations,
                cfg.weight_bound()
            );
        }
        let offset = light.clusters;
        let mut heavy_slot = 0;
        light
            .labels
            .iter()
            .map(|l| {
                l.unwrap_or_else(|| {
                    heavy_slot += 1;
                    offset + heavy_slot - 1
                })
            })
            .collect()
    };

    let cells = Partition::new(projected_labels, usize::MAX)?;
    if cells.cell_count() > k {
        return Err(Error::BudgetExceeded {
            cells: cells.cell_count(),
            budget: k,
        });
    }
    let partition = pca.fibers.pull_back(&cells.with_budget(k)?)?;
    diag.clusters_emitted = partition.cell_count();
    let report = covariance_loss(dist, &partition, &[])?;
    Ok(GeneralOutcome {
        partition,
        report,
        diagnostics: diag,
    })
}

/// `Y = E[X | PX]` restricted to a cell of the projection: the loss of the
/// fiber partition, used to check the reduction step end to end.
pub fn projection_loss(dist: &EmpiricalDistribution, pca: &PcaReduction) -> Result<f64> {
    let part = pca.fibers.fiber_partition();
    let y = conditional_expectation(dist, &part)?;
    let m = dist.dim();
    let raw_x = weighted_second_moment(dist.points(), dist.weights(), m);
    let raw_y = weighted_second_moment(&y.cell_means, &y.cell_weights, m);
    Ok((raw_x - raw_y).iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn dist(rows: &[Vec<f64>]) -> EmpiricalDistribution {
        EmpiricalDistribution::from_rows(rows, None).unwrap()
    }

    fn sphere(n: usize, m: usize, seed: u64) -> EmpiricalDistribution {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
                let r = crate::distribution::norm(&v);
                v.into_iter().map(|x| x / r * 0.999).collect()
            })
            .collect();
        dist(&rows)
    }

    #[test]
    fn pca_full_rank_is_lossless() {
        let d = sphere(30, 4, 1);
        let r = pca_reduce(&d, 4).unwrap();
        assert!(r.measured_tail < 1e-12);
        assert_eq!(r.projected.len(), d.len());
        assert!(projection_loss(&d, &r).unwrap() < 1e-12);
    }

    #[test]
    fn pca_exact_low_rank() {
        let d = dist(&[vec![0.3, 0.6], vec![-0.1, -0.2], vec![0.2, 0.4]]);
        let r = pca_reduce(&d, 1).unwrap();
        assert!(r.measured_tail < 1e-12);
        assert_eq!(r.projected.len(), 3);
    }

    #[test]
    fn pca_basis_vectors_tail() {
        let d = dist(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let r = pca_reduce(&d, 1).unwrap();
        assert!((r.measured_tail - 2f64.sqrt() / 3.0).abs() < 1e-12);
        for l in &r.eigenvalues {
            assert!((l - 1.0 / 3.0).abs() < 1e-12);
        }
        // ties resolved to the lexicographically largest signed vector
        let v = &r.basis[0];
        assert!((v[0] - 1.0).abs() < 1e-12, "{v:?}");
        assert!(pca_reduce(&d, 0).is_err());
        assert!(pca_reduce(&d, 4).is_err());
    }

    #[test]
    fn heavy_examples() {
        let d = sphere(40, 3, 2);
        assert!(split_heavy(&d, 100).heavy.is_empty());

        let d = EmpiricalDistribution::from_rows(&[vec![0.1], vec![0.2], vec![0.3]], Some(&[0.9, 0.05, 0.05])).unwrap();
        assert_eq!(split_heavy(&d, 10).heavy, vec![0]);

        let d = dist(&[vec![0.1], vec![0.2], vec![0.3]]);
        let s = split_heavy(&d, 9);
        assert_eq!(s.heavy.len(), 3);
        assert!(s.light.is_empty());
    }

    #[test]
    fn cube_examples() {
        let d = dist(&[vec![0.2, 0.2], vec![0.7, 0.2]]);
        assert_eq!(decompose_cubes(&d, &[0, 1], 1.0).unwrap().len(), 1);
        let cubes = decompose_cubes(&d, &[0, 1], 0.5).unwrap();
        assert_eq!(cubes.len(), 2);
        assert_eq!(cubes[0].key, vec![0, 0]);
        assert_eq!(cubes[1].key, vec![1, 0]);
        assert_eq!(decompose_cubes(&d, &[1], 0.5).unwrap().len(), 1);
        // a point on a face belongs to the larger index
        let d = dist(&[vec![0.5, -0.5]]);
        assert_eq!(decompose_cubes(&d, &[0], 0.5).unwrap()[0].key, vec![1, -1]);
        assert!(decompose_cubes(&d, &[0], 0.0).is_err());
    }

    #[test]
    fn classify_examples() {
        let cube = |mass| CubeCell {
            key: vec![0],
            anchor: vec![0.0],
            side: 1.0,
            members: vec![],
            mass,
        };
        let c = classify_cubes(&[cube(0.0), cube(0.5), cube(0.25)], 16);
        assert_eq!(c.case1, vec![0, 2]);
        assert_eq!(c.case2, vec![1]);
    }

    #[test]
    fn rounding_probabilities() {
        let s = RoundingScheme::new(vec![0.25, 0.25], 0.5);
        assert_eq!(s.plus_probabilities(&[0.25, 0.25]), vec![0.5, 0.5]);
        let q = s.plus_probabilities(&[0.5, 0.0]);
        assert!((q[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((q[1] - 1.0 / 3.0).abs() < 1e-15);
        let total: f64 = (0..4).map(|w| s.corner_probability(&[0.3, 0.1], w)).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_corner_probability_on_a_segment() {
        // p = 1, points at x₀ ± γ/2: P[same corner] = 2·(2/3)(1/3) = 4/9
        let gamma = 0.4;
        let s = RoundingScheme::new(vec![0.2], gamma);
        let (a, b) = ([0.0], [0.4]);
        let exact: f64 = (0..2)
            .map(|w| s.corner_probability(&a, w) * s.corner_probability(&b, w))
            .sum();
        assert!((exact - 4.0 / 9.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 1_000_000;
        let same = (0..draws)
            .filter(|_| s.sample(&a, &mut rng) == s.sample(&b, &mut rng))
            .count();
        let freq = same as f64 / draws as f64;
        let se = (4.0 / 9.0 * 5.0 / 9.0 / draws as f64).sqrt();
        assert!((freq - 4.0 / 9.0).abs() < 5.0 * se, "{freq}");
    }

    #[test]
    fn round_cube_rejects_outsiders() {
        let d = dist(&[vec![0.9]]);
        let cell = CubeCell {
            key: vec![0],
            anchor: vec![0.25],
            side: 0.5,
            members: vec![0],
            mass: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(round_cube(&cell, &d, &mut rng), Err(Error::OutsideCube { .. })));
    }

    #[test]
    fn idealized_examples() {
        let gamma = 0.2;
        let d = dist(&[vec![0.13]]);
        let cells = decompose_cubes(&d, &[0], gamma).unwrap();
        let z = idealized_moments(&cells[0], &d).unwrap();
        assert!((z.total_mass() - 1.0).abs() < 1e-15);
        for c in &z.corners {
            assert!((c.z[0] - 0.13).abs() < 1e-15);
        }
        assert!(z.covariance()[(0, 0)].abs() < 1e-15);

        // uniform on x₀ ± γ/2 with x₀ = 0.1: the far face is closed here
        let d = dist(&[vec![0.0], vec![0.2]]);
        let cell = CubeCell {
            key: vec![0],
            anchor: vec![0.1],
            side: gamma,
            members: vec![0, 1],
            mass: 1.0,
        };
        let z = idealized_moments(&cell, &d).unwrap();
        let plus = z.corners.iter().find(|c| c.pattern == 1).unwrap();
        let minus = z.corners.iter().find(|c| c.pattern == 0).unwrap();
        assert!((plus.q - 0.5).abs() < 1e-12);
        assert!((minus.q - 0.5).abs() < 1e-12);
        assert!((plus.z[0] - (0.1 + gamma / 6.0)).abs() < 1e-12);
        assert!((minus.z[0] - (0.1 - gamma / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn idealized_guard() {
        let d = dist(&[vec![0.0; 21]]);
        let cells = decompose_cubes(&d, &[0], 0.1).unwrap();
        assert!(matches!(
            idealized_moments(&cells[0], &d),
            Err(Error::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn build_shortcuts() {
        let d = sphere(5, 3, 4);
        let out = build_partition(&d, &GeneralConfig::new(8, 0)).unwrap();
        assert_eq!(out.partition.cell_count(), 5);
        assert!(out.report.loss_frobenius < 1e-12);

        let d = dist(&[vec![0.3, 0.1]]);
        let out = build_partition(&d, &GeneralConfig::new(3, 0)).unwrap();
        assert_eq!(out.partition.cell_count(), 1);
        assert_eq!(out.report.loss_frobenius, 0.0);
    }

    #[test]
    fn boolean_cube_beats_trivial() {
        let m = 8;
        let s = 1.0 / (m as f64).sqrt();
        let rows: Vec<Vec<f64>> = (0..256usize)
            .map(|b| (0..m).map(|i| if b >> i & 1 == 1 { s } else { -s }).collect())
            .collect();
        let d = dist(&rows);
        let out = build_partition(&d, &GeneralConfig::new(64, 3)).unwrap();
        assert!(out.partition.cell_count() <= 64);
        assert!(out.report.loss_frobenius < out.report.trivial_loss());
    }

    #[test]
    fn build_is_deterministic_and_in_budget() {
        let d = sphere(400, 10, 5);
        for k in [3, 8, 20, 64] {
            let mut cfg = GeneralConfig::new(k, 17);
            cfg.audit = true;
            let a = build_partition(&d, &cfg).unwrap();
            let b = build_partition(&d, &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.partition.cell_count() <= k);
            assert!(a.diagnostics.pca_tail <= a.diagnostics.pca_tail_bound + 1e-10);
        }
    }

    #[test]
    fn paper_mode_overflows_honestly() {
        let d = sphere(200, 6, 6);
        let mut cfg = GeneralConfig::new(16, 1);
        cfg.practical_mode = false;
        assert_eq!(cfg.target_dim(), 1);
        assert!(matches!(
            build_partition(&d, &cfg),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn dense_cubes_are_rounded_and_audited() {
        // one tight blob forces a Case II cube
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|_| 0.05 + 0.01 * rng.random::<f64>()).collect())
            .collect();
        let d = dist(&rows);
        let mut cfg = GeneralConfig::new(256, 2);
        cfg.audit = true;
        let out = build_partition(&d, &cfg).unwrap();
        let diag = &out.diagnostics;
        assert!(diag.cubes_case2 >= 1);
        assert!(diag.case2_clusters > diag.cubes_case2);
        for a in diag.cube_audits.as_ref().unwrap() {
            assert!(a.idealized_raw_gap <= a.idealized_bound + 1e-10);
            assert!((a.idealized_raw_gap - a.idealized_centered_gap).abs() < 1e-10);
            assert!(a.min_corner_mass >= a.corner_mass_floor * (1.0 - 1e-12));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pca_tail_bound(seed in 0u64..1000, m in 1usize..8, n in 1usize..40) {
            let d = sphere(n, m, seed);
            for t in 1..=m {
                let r = pca_reduce(&d, t).unwrap();
                let bound = 1.0 / (t as f64).sqrt();
                prop_assert!(r.measured_tail <= bound + 1e-10);
                prop_assert!(projection_loss(&d, &r).unwrap() <= bound + 1e-10);
            }
        }

        #[test]
        fn rounding_probabilities_in_range(x in prop::collection::vec(-0.5f64..0.5, 1..6), gamma in 0.01f64..1.0) {
            let anchor: Vec<f64> = x.iter().map(|v| v + gamma * 0.49 * v.signum()).collect();
            let s = RoundingScheme::new(anchor, gamma);
            for q in s.plus_probabilities(&x) {
                prop_assert!((1.0 / 3.0..=2.0 / 3.0).contains(&q));
            }
        }
    }
}
