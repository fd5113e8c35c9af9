//! Conditional-expectation clustering with small covariance loss.
//!
//! Given a finitely supported random vector `X` in the unit ball of `R^m`, the
//! crate builds partitions of its support into at most `k` cells so that
//! replacing every point by the mean of its cell (the conditional expectation
//! `Y = E[X | F]`) loses little covariance, measured as `‖Σ_X − Σ_Y‖_F`.
//!
//! Two partitioners carry the main guarantee:
//!
//! * [`pinning`] handles Boolean data on `{±1}^m/√m` by conditioning on the
//!   signs of a random coordinate subset.
//! * [`general`] handles arbitrary data: PCA reduction, heavy-point
//!   isolation, a cube grid and randomized rounding inside dense cubes.
//!
//! [`baselines`] provides k-means, a volumetric grid partitioner and an
//! exhaustive optimum for tiny inputs. [`partition::synthetic_data`] turns a
//! partition into anonymized synthetic rows.

pub mod baselines;
pub mod covariance;
pub mod distribution;
mod error;
pub mod general;
pub mod io;
pub mod partition;
pub mod pinning;

pub use covariance::{
    covariance, frobenius_distance, min_eigenvalue, moment_tensor, second_moment,
    CovarianceMatrix, MomentTensor,
};
pub use distribution::{rescale_to_unit_ball, snap_to_grid, EmpiricalDistribution};
pub use error::{Error, Result};
pub use general::{build_partition, Diagnostics, GeneralConfig};
pub use partition::{
    conditional_expectation, covariance_loss, equalize_min_cell_size, synthetic_data,
    ConditionalDistribution, CovarianceReport, Partition, SyntheticDataset,
};
pub use pinning::{pin_partition, PinningConfig, PinningOutcome};
