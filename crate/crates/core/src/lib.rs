//! Numerical Finsler and Riemannian geometry on single charts.
//!
//! Metrics and norms are written in a small expression language ([`dsl`])
//! and differentiated exactly with dual numbers. On top of that sit
//! Christoffel symbols and curvature ([`geometry`]), Minkowski norms and
//! Finsler fields ([`norms`]), Binet-Legendre metrics ([`bl`]), geodesics,
//! parallel transport and holonomy ([`transport`]), and the boundary
//! distance and Fried metric ([`fried`]).

pub mod bl;
pub mod dsl;
pub mod domain;
pub mod error;
pub mod fried;
pub mod geometry;
pub mod linalg;
pub mod norms;
pub mod ode;
pub mod scene;
pub mod transport;

pub use error::{GeomError, Result};
