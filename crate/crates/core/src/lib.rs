//! Implicit graph neural network with a closed-form spectral solver.
//!
//! The layer's hidden state is the fixed point of `Z = γ g(F) Z S + X`.
//! [`model`] solves it through eigendecompositions of `g(F)` and `S`,
//! [`oracle`] holds the slow reference solvers used to check it, and
//! [`trainer`] / [`attack`] build experiments on top.

pub mod attack;
pub mod experiments;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod spectral;
pub mod trainer;
