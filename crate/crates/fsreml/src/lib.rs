//! Smoothing parameter and variance component estimation for quadratically
//! penalized regression via the generalized Fellner-Schall update.
//!
//! The library covers three layers:
//!
//! * exact-REML fitting of Gaussian additive models ([`gaussian`]), where the
//!   smoothing parameters of arbitrary multi-penalty smooths (P-splines,
//!   adaptive smooths, tensor products, random effect blocks) are updated by
//!   an explicit multiplicative rule built from penalty traces;
//! * Laplace-approximate REML fitting for any Fisher-regular log likelihood
//!   ([`general`]), with GLM families and the Cox partial likelihood supplied
//!   in [`likelihoods`];
//! * a comparison harness ([`emlab`]) that evaluates the update against plain
//!   and accelerated EM steps as one-dimensional root finding problems.
//!
//! Basis and penalty construction lives in [`smooths`] and [`penalties`], and
//! the dense symmetric kernels (pseudo-determinant, pseudo-inverse,
//! factorization-reusing traces, positive definite repair) in [`linalg`].

pub mod dataset;
pub mod emlab;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod general;
pub mod likelihoods;
pub mod linalg;
pub mod penalties;
pub mod report;
pub mod simulate;
pub mod smooths;

pub use dataset::Dataset;
pub use error::{Error, Result};
pub use linalg::{EigenSystem, SymMatrix, DEFAULT_RANK_TOL};
pub use penalties::{PenaltyBlock, PenaltySet};
pub use report::FitReport;
pub use smooths::{ModelSpec, TermKind, TermSpec};
