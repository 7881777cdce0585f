//! Toolkit for 1-D coupled forward-backward SDEs: solvability classification
//! from slope-coefficient criteria, dominating-ODE integration with blow-up
//! and singularity detection, and grid construction of the decoupling field
//! u(t,x) with Y_t = u(t, X_t), cross-checked against analytic oracles.

pub mod characteristic;
pub mod classifier;
pub mod dominating;
pub mod model;
pub mod oracle;
pub mod report;
pub mod selftest;
pub mod solver;
