//! Exact dimension calculus for group and von Neumann algebra expression
//! trees, together with a seeded random-matrix engine that checks the
//! finite-size shadows of the asymptotic freeness statements the calculus
//! relies on.

pub mod algebra;
pub mod dims;
pub mod experiments;
pub mod linalg;
pub mod moments;
pub mod rational;
pub mod rmt;
pub mod sexpr;

pub use algebra::{DElement, FdAlgebra, Representation};
pub use dims::{DimValue, GroupExpr, VnExpr};
pub use linalg::CMatrix;
pub use rational::Rational;
