//! Wasserstein barycenters of weighted families of probability measures on
//! compact manifolds (Euclidean box, flat torus, round sphere), together with
//! numerical certificates for the structural facts that make them work:
//! first/second order balance at the barycenter, volume-distortion
//! coefficients and their curvature bounds, Jacobian determinant inequalities,
//! density bounds, Wasserstein Jensen inequalities, and curved multi-set /
//! random Brunn-Minkowski inequalities.
//!
//! # Layout
//!
//! | module | contents |
//! |--------|----------|
//! | [`geometry`] | closed-form distance / exp / log / cost Hessians |
//! | [`measures`] | atom clouds, mesh densities, reference measures |
//! | [`ot`] | exact (network simplex) and entropic (log-domain Sinkhorn) transport |
//! | [`karcher`] | Riemannian means of weighted configurations |
//! | [`barycenter`] | fixed-point and multi-marginal Wasserstein barycenters |
//! | [`distortion`] | barycentric volume distortion and Jacobian checks |
//! | [`functionals`] | entropy / potential / interaction functionals |
//! | [`harness`] | end-to-end inequality experiments |
//! | [`cli`] | the `wbary` command line |
//!
//! Every solver is deterministic given its seed, at any worker count. The
//! `examples/` directory has one runnable program per capability; the
//! `wbary` binary exposes the same operations as subcommands.

pub mod error;
pub mod geometry;
pub mod measures;
pub mod barycenter;
pub mod karcher;
pub mod ot;

pub use error::{Error, Result};
pub use geometry::{s_coeff, CostHessians, ManifoldKind, ManifoldSpec, Point, Tangent};
