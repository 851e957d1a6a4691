//! Approximate Green's functions for divergence-form parabolic operators
//!
//! ```text
//! u_t - D_i(a^ij D_j u + b^i u) + c^i D_i u + d u = f
//! ```
//!
//! on box domains with vanishing lateral boundary values, discretized by
//! tensor-product linear elements in space and backward Euler in time.
//! Alongside the solvers the crate carries the numerical checks that go with
//! such kernels: Gaussian envelopes, local boundedness, De Giorgi sequences,
//! exponential-weight energies, and the elliptic kernel obtained by time
//! integration.

pub mod error;
pub mod expr;
pub mod grid;
pub mod quadrature;
pub mod linalg;
pub mod coefficients;
pub mod solver;
pub mod green;
pub mod bounds;
pub mod davies;
pub mod elliptic;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
