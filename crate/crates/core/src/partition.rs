//! Partitions of the support, the conditional expectation they induce, and
//! what can be measured or produced from it: covariance loss reports,
//! minimum-cell-size equalization and the synthetic data map.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    weighted_covariance, weighted_mean, weighted_moment_tensor, weighted_second_moment,
    CovarianceMatrix,
};
use crate::distribution::EmpiricalDistribution;
use crate::error::{Error, Result};

/// Assignment of every support point to one of at most `k_budget` cells.
///
/// Labels are canonical: cells are numbered `0..cell_count` in order of
/// first appearance, so two partitions with the same cells compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct Partition {
    labels: Vec<usize>,
    cell_count: usize,
    k_budget: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionRepr {
    labels: Vec<usize>,
    k_budget: usize,
}

impl TryFrom<PartitionRepr> for Partition {
    type Error = Error;

    fn try_from(r: PartitionRepr) -> Result<Self> {
        Partition::new(r.labels, r.k_budget)
    }
}

impl From<Partition> for PartitionRepr {
    fn from(p: Partition) -> Self {
        PartitionRepr {
            labels: p.labels,
            k_budget: p.k_budget,
        }
    }
}

impl Partition {
    /// Canonicalizes arbitrary labels. Fails when the partition has more
    /// than `k_budget` cells.
    pub fn new(labels: Vec<usize>, k_budget: usize) -> Result<Self> {
        if k_budget == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
        let labels: Vec<usize> = labels
            .into_iter()
            .map(|l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        let cell_count = remap.len();
        if cell_count > k_budget {
            return Err(Error::BudgetExceeded {
                cells: cell_count,
                budget: k_budget,
            });
        }
        Ok(Self {
            labels,
            cell_count,
            k_budget,
        })
    }

    /// Every support point in its own cell.
    pub fn discrete(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            cell_count: n,
            k_budget: n.max(1),
        }
    }

    /// A single cell.
    pub fn trivial(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            cell_count: usize::from(n > 0),
            k_budget: 1,
        }
    }

    /// Same cells, different budget.
    pub fn with_budget(self, k_budget: usize) -> Result<Self> {
        Self::new(self.labels, k_budget)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    pub fn k_budget(&self) -> usize {
        self.k_budget
    }

    /// Member indices of every cell.
    pub fn cells(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.cell_count];
        for (i, &l) in self.labels.iter().enumerate() {
            cells[l].push(i);
        }
        cells
    }

    /// True when every cell of `self` lies inside a cell of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.len() != coarser.len() {
            return false;
        }
        let mut parent = vec![None; self.cell_count];
        self.labels
            .iter()
            .zip(&coarser.labels)
            .all(|(&fine, &coarse)| *parent[fine].get_or_insert(coarse) == coarse)
    }

    fn check_against(&self, dist: &EmpiricalDistribution) -> Result<()> {
        if self.labels.len() != dist.len() {
            return Err(Error::LabelMismatch(format!(
                "{} labels for {} support points",
                self.labels.len(),
                dist.len()
            )));
        }
        Ok(())
    }
}

/// The law of `Y = E[X | F]`: one mean and one mass per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDistribution {
    pub cell_means: Vec<Vec<f64>>,
    pub cell_weights: Vec<f64>,
}

impl ConditionalDistribution {
    pub fn mean(&self) -> Vec<f64> {
        let dim = self.cell_means.first().map_or(0, Vec::len);
        weighted_mean(&self.cell_means, &self.cell_weights, dim)
    }

    /// The value of `Y` at every support point.
    pub fn values<'a>(&'a self, part: &'a Partition) -> impl Iterator<Item = &'a [f64]> + 'a {
        part.labels().iter().map(|&l| self.cell_means[l].as_slice())
    }
}

pub fn conditional_expectation(
    dist: &EmpiricalDistribution,
    part: &Partition,
) -> Result<ConditionalDistribution> {
    part.check_against(dist)?;
    let (cell_means, cell_weights) = cell_means(dist, part.labels(), part.cell_count());
    Ok(ConditionalDistribution {
        cell_means,
        cell_weights,
    })
}

/// Per-cell means and masses. A singleton cell's mean is its point, bit for
/// bit, so discrete partitions reproduce `X` exactly.
fn cell_means(
    dist: &EmpiricalDistribution,
    labels: &[usize],
    cells: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let dim = dist.dim();
    let mut sums = vec![vec![0.0; dim]; cells];
    let mut mass = vec![0.0; cells];
    let mut first: Vec<Option<usize>> = vec![None; cells];
    let mut size = vec![0usize; cells];
    for (i, ((p, &w), &l)) in dist.points().iter().zip(dist.weights()).zip(labels).enumerate() {
        mass[l] += w;
        size[l] += 1;
        first[l].get_or_insert(i);
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += w * x;
        }
    }
    let means = sums
        .into_iter()
        .zip(&mass)
        .enumerate()
        .map(|(c, (s, &m))| match (size[c], first[c]) {
            (1, Some(i)) => dist.point(i).to_vec(),
            _ => s.into_iter().map(|v| v / m).collect(),
        })
        .collect();
    (means, mass)
}

/// `Σ_x w_x (x − y_x)(x − y_x)ᵀ` given each point's cell mean.
fn scatter_about(dist: &EmpiricalDistribution, labels: &[usize], means: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = dist.dim();
    let mut out = DMatrix::zeros(dim, dim);
    for ((p, &w), &l) in dist.points().iter().zip(dist.weights()).zip(labels) {
        out += crate::covariance::weighted_scatter(std::slice::from_ref(p), &[w], &means[l], dim);
    }
    out
}

fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Covariance loss of a partition.
///
/// `loss_frobenius` is `‖Σ_X − Σ_Y‖_F`, evaluated as the within-cell scatter
/// `‖E(X − Y)(X − Y)ᵀ‖_F` (the same matrix, without cancellation; exactly
/// zero when every cell is a single point). `loss_raw_moment` is
/// `‖E[XXᵀ] − E[YYᵀ]‖_F` taken as a literal difference, so its gap to
/// `loss_frobenius` is a numerical self-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub sigma_x: CovarianceMatrix,
    pub sigma_y: CovarianceMatrix,
    pub loss_frobenius: f64,
    pub loss_raw_moment: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensor_losses: BTreeMap<usize, f64>,
    pub cell_count: usize,
    pub min_cell_mass: f64,
}

impl CovarianceReport {
    /// Loss of the one-cell partition, `‖Σ_X‖_F`.
    pub fn trivial_loss(&self) -> f64 {
        self.sigma_x.frobenius_norm()
    }
}

pub fn covariance_loss(
    dist: &EmpiricalDistribution,
    part: &Partition,
    tensor_orders: &[usize],
) -> Result<CovarianceReport> {
    let y = conditional_expectation(dist, part)?;
    let dim = dist.dim();
    let sigma_x = weighted_covariance(dist.points(), dist.weights(), dim);
    let sigma_y = weighted_covariance(&y.cell_means, &y.cell_weights, dim);
    let raw_x = weighted_second_moment(dist.points(), dist.weights(), dim);
    let raw_y = weighted_second_moment(&y.cell_means, &y.cell_weights, dim);
    let mut tensor_losses = BTreeMap::new();
    for &d in tensor_orders {
        let tx = weighted_moment_tensor(dist.points(), dist.weights(), dim, d)?;
        let ty = weighted_moment_tensor(&y.cell_means, &y.cell_weights, dim, d)?;
        tensor_losses.insert(d, tx.frobenius_distance(&ty)?);
    }
    Ok(CovarianceReport {
        loss_frobenius: frobenius(&scatter_about(dist, part.labels(), &y.cell_means)),
        loss_raw_moment: frob_diff(&raw_x, &raw_y),
        sigma_x: CovarianceMatrix::from_matrix(sigma_x),
        sigma_y: CovarianceMatrix::from_matrix(sigma_y),
        tensor_losses,
        cell_count: part.cell_count(),
        min_cell_mass: y.cell_weights.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

fn frob_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖Σ_X − Σ_Y‖_F` for raw labels in `0..cells`, computed like
/// [`covariance_loss`] but without building a report.
pub(crate) fn loss_for_labels(dist: &EmpiricalDistribution, labels: &[usize], cells: usize) -> f64 {
    let (means, _) = cell_means(dist, labels, cells);
    frobenius(&scatter_about(dist, labels, &means))
}

/// `Σ_x w_x (x − y_{cell(x)})(x − y_{cell(x)})ᵀ`, the right-hand side of the
/// law of total covariance.
pub fn within_cell_scatter(
    dist: &EmpiricalDistribution,
    part: &Partition,
) -> Result<CovarianceMatrix> {
    let y = conditional_expectation(dist, part)?;
    let dim = dist.dim();
    let mut out = DMatrix::zeros(dim, dim);
    for cell in 0..part.cell_count() {
        let members: Vec<usize> = (0..dist.len()).filter(|&i| part.label(i) == cell).collect();
        let pts: Vec<Vec<f64>> = members.iter().map(|&i| dist.point(i).to_vec()).collect();
        let ws: Vec<f64> = members.iter().map(|&i| dist.weight(i)).collect();
        out += crate::covariance::weighted_scatter(&pts, &ws, &y.cell_means[cell], dim);
    }
    Ok(CovarianceMatrix::from_matrix(out))
}

/// Merges cells until each holds at least `min_count` source rows.
///
/// The smallest cell (lowest index on ties) is merged into the cell whose
/// mean is nearest in Euclidean distance (lowest index on ties), and the
/// merged mean is recomputed. Needs row counts: either the distribution was
/// built from unweighted rows or its weights are uniform.
pub fn equalize_min_cell_size(
    dist: &EmpiricalDistribution,
    part: &Partition,
    min_count: usize,
) -> Result<Partition> {
    part.check_against(dist)?;
    let counts = dist.row_counts()?;
    let total: usize = counts.iter().sum();
    if min_count > total {
        return Err(Error::InfeasibleMinCell { min_count, total });
    }
    let dim = dist.dim();
    let cells = part.cell_count();
    let mut size = vec![0usize; cells];
    let mut mass = vec![0.0; cells];
    let mut sums = vec![vec![0.0; dim]; cells];
    for i in 0..dist.len() {
        let l = part.label(i);
        size[l] += counts[i];
        mass[l] += dist.weight(i);
        for (s, x) in sums[l].iter_mut().zip(dist.point(i)) {
            *s += dist.weight(i) * x;
        }
    }
    let mut alive = vec![true; cells];
    let mut owner: Vec<usize> = (0..cells).collect();
    let mean = |sums: &[Vec<f64>], mass: &[f64], c: usize| -> Vec<f64> {
        sums[c].iter().map(|v| v / mass[c]).collect()
    };
    loop {
        let live: Vec<usize> = (0..cells).filter(|&c| alive[c]).collect();
        if live.len() <= 1 {
            break;
        }
        let smallest = *live
            .iter()
            .min_by_key(|&&c| (size[c], c))
            .expect("at least two live cells");
        if size[smallest] >= min_count {
            break;
        }
        let from = mean(&sums, &mass, smallest);
        let mut target = None;
        let mut best = f64::INFINITY;
        for &c in &live {
            if c == smallest {
                continue;
            }
            let d: f64 = mean(&sums, &mass, c)
                .iter()
                .zip(&from)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best {
                best = d;
                target = Some(c);
            }
        }
        let target = target.expect("another live cell exists");
        alive[smallest] = false;
        size[target] += size[smallest];
        mass[target] += mass[smallest];
        let moved = std::mem::take(&mut sums[smallest]);
        for (s, v) in sums[target].iter_mut().zip(moved) {
            *s += v;
        }
        for o in owner.iter_mut() {
            if *o == smallest {
                *o = target;
            }
        }
    }
    let labels = part.labels().iter().map(|&l| owner[l]).collect();
    Partition::new(labels, part.k_budget())
}

/// Synthetic rows produced by replacing every source row with the mean of
/// its cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub rows: Vec<Vec<f64>>,
    /// Smallest number of source rows sharing one synthetic value.
    pub anonymity_level: usize,
    pub source_cells: Vec<usize>,
    pub cell_sizes: Vec<usize>,
}

impl SyntheticDataset {
    pub fn mean(&self) -> Vec<f64> {
        let dim = self.rows.first().map_or(0, Vec::len);
        let n = self.rows.len() as f64;
        let mut mu = vec![0.0; dim];
        for r in &self.rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        mu
    }
}

/// Emits one synthetic row per source row, grouped by support point in
/// support order.
pub fn synthetic_data(dist: &EmpiricalDistribution, part: &Partition) -> Result<SyntheticDataset> {
    let counts = dist.row_counts()?;
    let row_support: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
        .collect();
    synthetic_data_for_rows(dist, part, &row_support)
}

/// Emits one synthetic row per entry of `row_support`, which maps every
/// source row to its support point.
pub fn synthetic_data_for_rows(
    dist: &EmpiricalDistribution,
    part: &Partition,
    row_support: &[usize],
) -> Result<SyntheticDataset> {
    let y = conditional_expectation(dist, part)?;
    if let Some(&bad) = row_support.iter().find(|&&s| s >= dist.len()) {
        return Err(Error::LabelMismatch(format!(
            "row refers to support point {bad} of {}",
            dist.len()
        )));
    }
    let mut cell_sizes = vec![0usize; part.cell_count()];
    let mut rows = Vec::with_capacity(row_support.len());
    let mut source_cells = Vec::with_capacity(row_support.len());
    for &s in row_support {
        let l = part.label(s);
        cell_sizes[l] += 1;
        rows.push(y.cell_means[l].clone());
        source_cells.push(l);
    }
    let anonymity_level = cell_sizes
        .iter()
        .copied()
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    Ok(SyntheticDataset {
        rows,
        anonymity_level,
        source_cells,
        cell_sizes,
    })
}
