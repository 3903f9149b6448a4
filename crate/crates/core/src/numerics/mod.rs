//! Dense linear algebra and gradient verification.
//!
//! Everything here works in `f64` on row-major [`Matrix`] values.

mod cholesky;
mod eigen;
mod gradcheck;
mod matrix;

pub use cholesky::{
    cholesky, cholesky_with, log_det, solve_triangular, CholeskyFactor, JitterLadder,
    TriangleSide,
};
pub use eigen::{principal_scores, top_eigen, SymmetricEigen};
pub use gradcheck::grad_check;
pub use matrix::Matrix;
