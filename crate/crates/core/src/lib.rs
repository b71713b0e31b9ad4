//! Dynamically bi-orthogonal (DyBO) solver for 2D time-dependent stochastic
//! diffusion problems with multiscale coefficients.
//!
//! The solution of `du/dt = div(a(x, ξ) grad u) + f` on the unit square with
//! homogeneous Dirichlet data is tracked in truncated Karhunen-Loeve form
//! `u ≈ ubar(x,t) + Σ u_i(x,t) Y_i(ξ,t)`, where the stochastic modes are
//! carried in a polynomial-chaos frame, `Y = H(ξ) A(t)` with `AᵀA = I`.
//! Evolution equations keep the spatial modes `u_i` mutually orthogonal and
//! the pair (U, Y) bi-orthogonal, so the expansion stays a KL expansion as it
//! evolves.
//!
//! Spatial discretization is a conforming Q1 method on a uniform fine grid,
//! optionally compressed onto a generalized multiscale coarse space built from
//! local spectral problems (module [`msbasis`]) and enriched adaptively from
//! online residuals (module [`online`]). The [`oracle`] module carries a full
//! gPC-Galerkin fine-scale solver used as a truncation-free reference.

pub mod dybo;
mod error;
pub mod fem;
pub mod gpc;
pub mod grid;
pub mod media;
pub mod msbasis;
pub mod online;
pub mod oracle;

pub use error::{Error, Result};
