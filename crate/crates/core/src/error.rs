use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input contains no rows")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("row {row} has norm {norm} > 1; rescale the data into the unit ball")]
    NormExceeded { row: usize, norm: f64 },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("partition does not match distribution: {0}")]
    LabelMismatch(String),
    #[error("point {row} is not on the scaled Boolean cube (coordinate {coord})")]
    NotBoolean { row: usize, coord: usize },
    #[error("min cell size {min_count} is infeasible for {total} rows")]
    InfeasibleMinCell { min_count: usize, total: usize },
    #[error("count semantics required: {0}")]
    CountsRequired(String),
    #[error("enumeration budget exceeded: {needed} > {budget}")]
    EnumerationBudget { needed: u128, budget: u128 },
    #[error("cluster budget exceeded: {cells} cells > k = {budget}")]
    BudgetExceeded { cells: usize, budget: usize },
    #[error("point {row} lies outside its cube by {excess}")]
    OutsideCube { row: usize, excess: f64 },
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
