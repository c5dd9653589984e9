//! Exact causal Green's matrices for invertible matrix differential operators,
//! and continuous-domain inverse problems regularized by total-variation norms
//! on vector measures.
//!
//! The crate is organized around a symbolic representation of causal
//! exponential-polynomial functions plus Dirac combs ([`gf::GeneralizedFunction`]),
//! which is closed under differentiation, operator application, shifting and
//! convolution with atomic measures. On top of it sit:
//!
//! - [`odo`]: scalar differential operators (polynomials in D), their roots and
//!   causal Green's functions;
//! - [`mdo`]: matrix differential operators, determinants, adjugates, Green's
//!   matrices, null spaces, first-order systems;
//! - [`measure`]: vector-valued atomic measures with inner/outer norms;
//! - [`forward`]: measurement functionals, admissibility, system assembly;
//! - [`solver`]: FISTA with exact group proximal steps and dual certificates;
//! - [`l2ref`]: the Hilbertian smoothing-spline baseline;
//! - [`problem`]: the JSON problem-file schema and command pipelines.

pub mod error;
pub mod forward;
pub mod gf;
pub mod l2ref;
pub mod mdo;
pub mod measure;
pub mod odo;
pub mod problem;
pub mod solver;

pub use error::Error;
