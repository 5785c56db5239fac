//! Low-rank binary weight factorization.
//!
//! A weight `W ∈ R^{n×m}` is approximated as `diag(s1) · U±1 · V±1ᵀ · diag(s2)` with
//! sign matrices of rank `r` stored one bit per entry and two 16-bit scale vectors.

pub mod admm;
pub mod balance;
pub mod bpw;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod packing;
pub mod pipeline;
pub mod precond;
pub mod refine;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
