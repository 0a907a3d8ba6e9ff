//! Penalized Q-aggregation of affine estimators in the Gaussian sequence model.
//!
//! Given `M` affine estimators `mu_j = A_j y + b_j` of an unknown mean vector
//! `f` observed as `y = f + xi`, the crate builds the Mallows Cp criterion,
//! the Q-aggregation penalty and their prior-weighted and variance-plug-in
//! variants, reduces each of them exactly to a quadratic program over the
//! probability simplex, solves it, and ships a Monte Carlo harness that checks
//! the resulting sharp oracle inequalities and the concentration bounds that
//! drive them.
//!
//! Module map:
//!
//! * [`estimators`]: structured affine maps, estimator banks, projector
//!   construction, smoothness grids and the difference-based variance estimate.
//! * [`criteria`]: Cp, penalty, `H_pen`, `V_pen`, `W_pen`, `U`, the pairwise
//!   decomposition quantities and the exact Gram reduction to a simplex QP.
//! * [`qp`]: Euclidean simplex projection, accelerated projected gradient,
//!   KKT certificate and a brute-force lattice oracle.
//! * [`procedures`]: the one-call aggregation procedures.
//! * [`simulation`]: noise generation, trial runner, tail and identity checks.
//! * [`io`]: header-free CSV matrices.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod error;
pub mod estimators;
pub mod io;
pub mod linalg;
pub mod par;
pub mod procedures;
pub mod qp;
pub mod simulation;

pub use criteria::{ObjectiveKind, ObjectiveSpec, Prior, QpProblem, SimplexPoint};
pub use error::{Error, Result};
pub use estimators::{AffineEstimator, EstimatorBank, LinearMap};
pub use procedures::AggregateOutput;
pub use qp::{SolveOptions, SolveResult};
