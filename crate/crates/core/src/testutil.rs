//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{KernelFamily, KernelSpec};
use crate::numerics::Matrix;
use crate::svgp::{SparseGp, VariationalCov, VariationalMode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// A well-conditioned random GP: inducing points spread over `[-1.5, 1.5]^Q`.
pub fn random_gp(
    rng: &mut ChaCha8Rng,
    family: KernelFamily,
    mode: VariationalMode,
    m: usize,
    d: usize,
    q: usize,
) -> SparseGp {
    let ell = rng.random_range(0.6..1.4);
    let kernel = KernelSpec::new(family, ell).unwrap();
    let inducing = random_matrix(rng, m, q, 1.5);
    let var_mean = random_matrix(rng, m, d, 1.0);
    let var_cov = match mode {
        VariationalMode::Full => VariationalCov::Full(
            (0..d)
                .map(|_| {
                    Matrix::from_fn(m, m, |i, j| {
                        if i == j {
                            rng.random_range(0.3..1.0)
                        } else if j < i {
                            rng.random_range(-0.3..0.3)
                        } else {
                            0.0
                        }
                    })
                })
                .collect(),
        ),
        VariationalMode::Diagonal => {
            VariationalCov::Diagonal(Matrix::from_fn(d, m, |_, _| rng.random_range(0.3..1.0)))
        }
    };
    let noise = rng.random_range(0.2..0.8);
    let mean = rng.random_range(-0.5..0.5);
    SparseGp::new(kernel, mean, noise, inducing, var_mean, var_cov).unwrap()
}

pub fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}
