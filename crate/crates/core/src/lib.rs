//! Numerical toolkit for stochastic control of Markov regime-switching systems.
//!
//! The library simulates forward SDEs of the form
//!
//! ```text
//! dx(t) = b(t, x, u, α) dt + σ(t, x, u, α) dW(t) + γ(t, x, u, α) dΦ̃(t)
//! ```
//!
//! where `α` is a finite-state Markov chain in canonical unit-vector
//! coordinates and `Φ̃_j` are the compensated counting processes of jumps into
//! each state. On top of the forward machinery it provides:
//!
//! * least-squares Monte Carlo solvers for backward SDEs driven by `(W, Φ̃)`,
//! * first/second-order adjoint equations and Hamiltonian minimization checks
//!   for the stochastic maximum principle,
//! * spike-variation expansions with empirical convergence-rate estimation,
//! * the recursive-utility (controlled FBSDE) variant of the same machinery,
//! * a monotone finite-difference solver for the associated HJB system with
//!   Monte Carlo cross-validation of the verification inequality.
//!
//! Everything is deterministic given a seed: random numbers come from
//! counter-based per-path streams, and parallel reductions use fixed chunking
//! so results do not depend on the worker count.

pub mod bsde;
pub mod error;
pub mod export;
pub mod forward;
pub mod grid;
pub mod hjb;
pub mod model;
pub mod mp;
pub mod recursive;
pub mod regime;
pub mod regression;
pub mod rng;
pub mod spike;
pub mod stats;

pub use error::{CoreError, Result};
