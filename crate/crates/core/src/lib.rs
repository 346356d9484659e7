//! Annealed adaptive importance sampling with Gaussian / Student-t mixture
//! proposals, and a physics-informed training loop that resamples collocation
//! points from the PDE residual.
//!
//! The crate splits into two halves. The sampling half ([`mixture`], [`em`],
//! [`target`], [`aais`], [`samplers`]) approximates sharply peaked
//! unnormalized densities with finite mixtures driven by importance-weighted
//! EM under an annealing ladder. The solver half ([`pinn`], [`pde`],
//! [`train`]) trains a small tanh network on multi-peak Poisson problems and
//! feeds its squared residual back into the samplers to concentrate
//! collocation points where the solve is worst.
//!
//! Everything is deterministic for a fixed seed: callers own the RNG, and
//! batch reductions run in a fixed order even when parallelized.

pub mod aais;
pub mod em;
pub mod error;
pub mod mixture;
mod numeric;
pub mod pde;
pub mod pinn;
pub mod samplers;
pub mod target;
pub mod train;

pub use error::{CoreError, Result};
