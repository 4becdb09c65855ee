//! Tensor-network simulation of random out-of-time-order-correlator (OTOC)
//! circuits: ensemble generation with lightcone pruning, exact state-vector,
//! MPS and belief-propagation PEPS evolution, boundary-MPS extraction, and
//! the statistics used to compare them.

extern crate blas_src;

pub mod tensor;
pub mod circuits;
pub mod statevector;
pub mod mps;
pub mod peps;
pub mod extraction;
pub mod metrics;
pub mod cli;
