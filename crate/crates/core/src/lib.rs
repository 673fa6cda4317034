//! Tensor-parallel Fourier neural operator.
//!
//! The input `X[b, c, x, y, z, t]` is split along `x` across ranks. Each FNO
//! block transforms the unsplit axes locally, truncates them, re-partitions to
//! a `ky` split, transforms and truncates `x`, applies the rank-local spectral
//! weight shard, and runs the same chain backwards. See [`fno`] for the model,
//! [`comm`] for the transport and collectives.

pub mod comm;
pub mod fno;
pub mod partition;
pub mod spectral;
pub mod tensor;

pub use num_complex::Complex;
