//! Numerical laboratory for analytic quasi-periodic cocycles.
//!
//! The crate samples Lyapunov exponents of linear cocycles over torus
//! translations, checks avalanche-principle estimates along orbits, measures
//! large deviations and sublevel sets, and ships the supporting harmonic
//! analysis (Fejér kernels, Birkhoff sums, BMO norms).
//!
//! All Monte-Carlo averages are deterministic: per-sample values are computed
//! in parallel but reduced in a fixed order, so results do not depend on the
//! size of the worker pool.

// `!(x > 0.0)` guards are written to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod avalanche;
pub mod cocycle;
pub mod deviations;
pub mod error;
pub mod harmonic;
pub mod linalg;
pub mod lyapunov;
pub mod stats;
pub mod torus;

pub use cocycle::{FourierCocycle, FourierMode, IterateResult};
pub use error::{LabError, Result};
pub use torus::{DcMode, Frequency, SampleScheme, Sampler, TorusPoint};
