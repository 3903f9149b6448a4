use log::debug;

use super::Matrix;
use crate::error::{GroveError, Result};

/// Escalation schedule applied when a plain factorization fails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterLadder {
    pub start: f64,
    pub cap: f64,
    pub factor: f64,
}

impl Default for JitterLadder {
    fn default() -> Self {
        JitterLadder {
            start: 1e-6,
            cap: 1e-2,
            factor: 10.0,
        }
    }
}

/// Lower Cholesky factor of `source + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangleSide {
    /// Solve `L·x = b`.
    Lower,
    /// Solve `Lᵀ·x = b`.
    LowerTransposed,
}

/// Factorizes `m + jitter·I` with the default jitter ladder.
pub fn cholesky(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    cholesky_with(m, jitter, JitterLadder::default())
}

pub fn cholesky_with(m: &Matrix, jitter: f64, ladder: JitterLadder) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(GroveError::ShapeMismatch(format!(
            "cholesky of non-square {:?}",
            m.shape()
        )));
    }
    if !m.all_finite() {
        return Err(GroveError::NonFiniteValue("cholesky input".into()));
    }
    if !m.is_symmetric(1e-10 * (1.0 + max_abs(m))) {
        return Err(GroveError::ShapeMismatch(
            "cholesky input is not symmetric".into(),
        ));
    }
    let mut jitter = jitter.max(0.0);
    loop {
        if let Some(lower) = try_factor(m, jitter) {
            if jitter > 0.0 {
                debug!("cholesky succeeded with jitter {jitter:e}");
            }
            return Ok(CholeskyFactor { lower, jitter });
        }
        jitter = if jitter < ladder.start {
            ladder.start
        } else {
            jitter * ladder.factor
        };
        if jitter > ladder.cap * (1.0 + 1e-9) {
            return Err(GroveError::NotPositiveDefinite { cap: ladder.cap });
        }
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.as_slice().iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn try_factor(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let mut d = m[(j, j)] + jitter - lj[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s: f64 = l.row(i)[..j]
                .iter()
                .zip(&l.row(j)[..j])
                .map(|(a, b)| a * b)
                .sum();
            l[(i, j)] = (m[(i, j)] - s) / d;
        }
    }
    Some(l)
}

impl CholeskyFactor {
    /// Wraps an existing lower-triangular factor. The diagonal must be positive.
    pub fn from_lower(lower: Matrix) -> Result<Self> {
        if !lower.is_square() {
            return Err(GroveError::ShapeMismatch("factor must be square".into()));
        }
        if lower.diag().iter().any(|d| !(*d > 0.0)) {
            return Err(GroveError::NotPositiveDefinite { cap: 0.0 });
        }
        Ok(CholeskyFactor {
            lower: lower.lower_triangle(),
            jitter: 0.0,
        })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Jitter that was added to the diagonal before factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower).expect("square factor")
    }

    /// Solves `(L·Lᵀ)·x = b`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let y = solve_triangular(self, b, TriangleSide::Lower)?;
        solve_triangular(self, &y, TriangleSide::LowerTransposed)
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim()))
            .expect("identity has matching shape")
    }
}

/// Forward or backward substitution against the factor's triangle, column by column of `b`.
pub fn solve_triangular(f: &CholeskyFactor, b: &Matrix, side: TriangleSide) -> Result<Matrix> {
    let n = f.dim();
    if b.rows() != n {
        return Err(GroveError::ShapeMismatch(format!(
            "solve_triangular: factor {n}x{n}, rhs {:?}",
            b.shape()
        )));
    }
    let l = &f.lower;
    let k = b.cols();
    let mut x = b.clone();
    match side {
        TriangleSide::Lower => {
            for i in 0..n {
                for p in 0..i {
                    let lip = l[(i, p)];
                    if lip != 0.0 {
                        for c in 0..k {
                            let v = x[(p, c)];
                            x[(i, c)] -= lip * v;
                        }
                    }
                }
                let d = l[(i, i)];
                x.row_mut(i).iter_mut().for_each(|v| *v /= d);
            }
        }
        TriangleSide::LowerTransposed => {
            for i in (0..n).rev() {
                for p in (i + 1)..n {
                    let lpi = l[(p, i)];
                    if lpi != 0.0 {
                        for c in 0..k {
                            let v = x[(p, c)];
                            x[(i, c)] -= lpi * v;
                        }
                    }
                }
                let d = l[(i, i)];
                x.row_mut(i).iter_mut().for_each(|v| *v /= d);
            }
        }
    }
    Ok(x)
}

/// `log det(L·Lᵀ) = 2 Σ log Lᵢᵢ`.
pub fn log_det(f: &CholeskyFactor) -> f64 {
    2.0 * f.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
}
