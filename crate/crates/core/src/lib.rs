//! Exact recovery of rank-1 matrices from partial bilinear data.
//!
//! A rank-1 matrix `X = x yᵀ` with `x₁ = 1` is determined by the variable
//! vector `z = [x₂, …, xₙ, y₁, …, y_m]`.  Partially observed entries (or
//! linear combinations of them with hidden connectivity) become polynomial
//! equations `h_k(z) = 0`.  This crate recovers `z` exactly by:
//!
//! 1. building an objective `u₂ᵀ Q u₂` whose coefficient matrix `Q` has an
//!    arrowhead sparsity pattern and vanishes exactly at the true point
//!    (closed form when the data forms chains, otherwise by a feasibility
//!    SDP over the Kronecker basis `h ⊗ u₂`),
//! 2. maximizing `ρ` subject to `f_sum − ρ + Σ h_k² λ_k` being a sum of
//!    squares, and
//! 3. reading the solution off the one-dimensional null space of the
//!    resulting Gram matrix.
//!
//! Module map:
//! - [`polybasis`]: sparse multivariate polynomials, the ordered monomial
//!   bases `u₁`/`u₂`, and Kronecker index arithmetic.
//! - [`model`]: problem data (instances, constraints, bipartite graph),
//!   chain extraction, truth propagation, and constraint mixing.
//! - [`certify`]: closed-form arrowhead objective and the positive
//!   semidefinite certificate `U` with symbolic identity verification.
//! - [`sdpcore`]: block semidefinite programming model, a dense primal-dual
//!   interior-point solver, and SDPA sparse file import/export.
//! - [`pipeline`]: the two-stage solve, Gram extraction, null-space
//!   recovery, and the identity-objective baseline.
//! - [`toolkit`]: random instance generation, benchmark harness, and the
//!   pieces behind the `mcsos` command line tool.

pub mod certify;
pub mod model;
pub mod pipeline;
pub mod polybasis;
pub mod sdpcore;
pub mod toolkit;

use std::fmt::{Debug, Display};

/// Floating point scalar used by the symbolic layers of the crate.
///
/// The polynomial algebra, the data model and the certificate constructions
/// are generic over this trait so they can run in `f32` or `f64`.  The
/// numeric layers (`sdpcore`, `pipeline`, `toolkit`) are fixed to `f64`
/// because their tolerances and LAPACK kernels are calibrated for double
/// precision.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossy conversion from `f64` (used for tolerances).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Double precision polynomial in the completion variables.
pub type Polynomial = polybasis::Polynomial<f64>;
/// Double precision sparse symmetric matrix (houses certificate `U`).
pub type SparseSymMat = polybasis::SparseSymMat<f64>;
/// Double precision problem instance.
pub type Instance = model::Instance<f64>;
/// Double precision constraint.
pub type Constraint = model::Constraint<f64>;
/// Double precision arrowhead objective matrix.
pub type ArrowheadQ = certify::ArrowheadQ<f64>;
/// Double precision exactness certificate.
pub type Certificate = certify::Certificate<f64>;

pub use model::{BipartiteGraph, ChainTree};
pub use pipeline::{Recovery, RecoveryStatus, SolveOptions};
pub use polybasis::{KronIndex, MonomialBasis};
pub use sdpcore::{SdpOptions, SdpProblem, SdpSolution, SdpStatus};
