//! Whole-body inverse-dynamics MPC for legged loco-manipulation.
//!
//! The crate provides, bottom to top:
//!
//! - [`model`]: floating-base kinematic tree, manifold configuration ops,
//!   and a URDF-subset loader;
//! - [`dynamics`]: rigid-body dynamics kernels (RNEA, CRBA, centroidal
//!   momentum) with exact first derivatives;
//! - [`ocp`]: stage-wise optimal control problems for six dynamics
//!   formulations (whole-body inverse/forward dynamics, centroidal
//!   velocity/acceleration, each with path-constraint and embedded variants);
//! - [`solver`]: a primal-dual interior-point method whose linear algebra is
//!   a Riccati recursion over the stage structure, with warm starting;
//! - [`runtime`]: the receding-horizon loop, solution interpolation and the
//!   joint-level PD law;
//! - [`sim`]: a deterministic closed-loop simulator with scheduled contacts,
//!   disturbance injection and solve-delay emulation;
//! - [`cli`]: benchmark / scenario / verification entry points.

pub mod assets;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod geom;
pub mod model;
pub mod ocp;
pub mod runtime;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod verify;
