use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Variants fall into three families which the command-line front end maps
/// onto exit codes: invalid input ([`LabError::is_malformed`]), violated
/// mathematical preconditions ([`LabError::is_precondition`]) and numerical
/// guards that tripped while computing ([`LabError::is_guard`]).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("imaginary offset {offset} lies outside the strip of half-width {rho}")]
    OffsetOutsideStrip { offset: f64, rho: f64 },

    #[error("lattice grid of {n}^{d} points overflows")]
    LatticeOverflow { n: usize, d: usize },

    #[error("strong Diophantine scans are defined only for d = 1 (got d = {0})")]
    StrongModeDimension(usize),

    #[error("determinant is numerically identically zero (max |det| = {max_abs:e} over {samples} samples)")]
    IdenticallySingular { max_abs: f64, samples: usize },

    #[error("Cramer sandwich violated at {violations} samples (worst slack {worst_slack:e})")]
    SandwichViolated { violations: usize, worst_slack: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("finite-scale gap {gap:.3e} at index {index} is below the required {required:.3e}")]
    GapTooSmall {
        index: usize,
        gap: f64,
        required: f64,
    },

    #[error("infeasible block partition: {0}")]
    InfeasiblePartition(String),

    #[error("signature mismatch: {0}")]
    SignatureMismatch(String),

    #[error("no nonzero sublevel or deviation mass at the sampled resolution")]
    BelowResolution,

    #[error("too many singular samples: {excluded} of {total} exceed the {limit} guard")]
    TooManyExcluded {
        excluded: usize,
        total: usize,
        limit: f64,
    },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("integer matrix is not unimodular (det = {0})")]
    NotUnimodular(i128),
}

impl LabError {
    pub fn is_malformed(&self) -> bool {
        matches!(
            self,
            LabError::Parse(_) | LabError::DimensionMismatch { .. }
        )
    }

    pub fn is_guard(&self) -> bool {
        matches!(
            self,
            LabError::IdenticallySingular { .. }
                | LabError::SandwichViolated { .. }
                | LabError::NonFinite(_)
                | LabError::TooManyExcluded { .. }
                | LabError::LatticeOverflow { .. }
        )
    }

    pub fn is_precondition(&self) -> bool {
        !self.is_malformed() && !self.is_guard()
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
