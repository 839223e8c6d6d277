//! Finite PEPS ground states of the spin-1/2 J1-J2 model on open square
//! lattices.
//!
//! The pipeline: imaginary-time [`simple_update`] prepares a state, the
//! Monte-Carlo sampled sign-gradient descent in [`gradient_opt`] refines it,
//! and [`observables`] measures energies and spin correlations. Exact
//! diagonalization ([`ed`]) and brute-force contraction
//! ([`contraction::amplitude_bruteforce`]) serve as oracles on small lattices.

pub mod config;
pub mod contraction;
pub mod ed;
pub mod error;
pub mod gradient_opt;
pub mod lattice;
pub mod monte_carlo;
pub mod observables;
pub mod peps;
pub mod simple_update;
pub mod tensor;

pub use error::{PepsError, Result};
