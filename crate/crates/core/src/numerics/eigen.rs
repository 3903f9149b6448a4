use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Matrix;
use crate::error::{GroveError, Result};

/// Leading eigenpairs of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// One eigenvector per column, matching `values`. Each column is scaled to
    /// unit norm and signed so that its largest-magnitude entry is positive.
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations; returns all eigenpairs of a small symmetric matrix
/// (unsorted, vectors in columns).
fn jacobi(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let scale: f64 = a.as_slice().iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diag(), v)
}

/// Modified Gram-Schmidt on the columns of `v`, in place. Columns that
/// collapse to zero are replaced by the first basis vector orthogonal to the
/// previous ones.
fn orthonormalize(v: &mut Matrix) {
    let (n, k) = v.shape();
    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|r| v[(r, i)] * v[(r, j)]).sum();
                for r in 0..n {
                    let vi = v[(r, i)];
                    v[(r, j)] -= dot * vi;
                }
            }
        }
        let norm = (0..n).map(|r| v[(r, j)] * v[(r, j)]).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for r in 0..n {
                v[(r, j)] /= norm;
            }
            continue;
        }
        for e in 0..n {
            let residual: f64 = 1.0 - (0..j).map(|i| v[(e, i)] * v[(e, i)]).sum::<f64>();
            if residual > 1e-6 {
                for r in 0..n {
                    v[(r, j)] = if r == e { 1.0 } else { 0.0 };
                }
                for i in 0..j {
                    let dot = v[(e, i)];
                    for r in 0..n {
                        let vi = v[(r, i)];
                        v[(r, j)] -= dot * vi;
                    }
                }
                let norm = (0..n).map(|r| v[(r, j)] * v[(r, j)]).sum::<f64>().sqrt();
                for r in 0..n {
                    v[(r, j)] /= norm;
                }
                break;
            }
        }
    }
}

/// The `k` largest eigenpairs of the symmetric matrix `a`, by orthogonal
/// iteration with a Rayleigh-Ritz step. Deterministic for a given input.
pub fn top_eigen(a: &Matrix, k: usize) -> Result<SymmetricEigen> {
    let n = a.rows();
    if !a.is_square() {
        return Err(GroveError::ShapeMismatch(format!("top_eigen: {:?} is not square", a.shape())));
    }
    if k == 0 || k > n {
        return Err(GroveError::InvalidConfig(format!("top_eigen: k = {k} for a {n}x{n} matrix")));
    }
    if !a.all_finite() {
        return Err(GroveError::NonFiniteValue("top_eigen input".into()));
    }
    if !a.is_symmetric(1e-9 * a.frobenius_norm().max(1.0)) {
        return Err(GroveError::InvalidConfig("top_eigen: matrix is not symmetric".into()));
    }

    // Shift so the spectrum is nonnegative and the largest eigenvalues dominate.
    let radius = (0..n)
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut shifted = a.clone();
    shifted.add_diag(radius);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_e16e);
    let mut v = Matrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize(&mut v);
    let tol = 1e-12 * radius.max(f64::MIN_POSITIVE);
    for _ in 0..5000 {
        let av = a.matmul(&v)?;
        let h = v.t_matmul(&av)?;
        let residual = av.sub(&v.matmul(&h)?)?.frobenius_norm();
        if residual <= tol {
            break;
        }
        v = shifted.matmul(&v)?;
        orthonormalize(&mut v);
    }

    let h = v.t_matmul(&a.matmul(&v)?)?;
    let h = Matrix::from_fn(k, k, |i, j| 0.5 * (h[(i, j)] + h[(j, i)]));
    let (vals, rot) = jacobi(&h);
    let vecs = v.matmul(&rot)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|x, y| vals[*y].total_cmp(&vals[*x]));
    let mut vectors = Matrix::zeros(n, k);
    for (dst, &src) in order.iter().enumerate() {
        let col = vecs.col_to_vec(src);
        let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[(r, dst)] = sign * col[r];
        }
    }
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| vals[i]).collect(),
        vectors,
    })
}

/// Projects the rows of `data` onto its `k` leading principal axes, then
/// rescales each score column to standard deviation `scale`. Axes with zero
/// variance stay at zero.
pub fn principal_scores(data: &Matrix, k: usize, scale: f64) -> Result<Matrix> {
    let (n, d) = data.shape();
    if n == 0 {
        return Err(GroveError::EmptyDataset("principal_scores: no rows".into()));
    }
    let mut centered = data.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| data[(i, j)]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let mut cov = centered.t_matmul(&centered)?;
    cov.scale_mut(1.0 / n as f64);
    let cov = Matrix::from_fn(d, d, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let eig = top_eigen(&cov, k)?;
    let mut scores = centered.matmul(&eig.vectors)?;
    for j in 0..k {
        let sd = ((0..n).map(|i| scores[(i, j)].powi(2)).sum::<f64>() / n as f64).sqrt();
        let factor = if sd > 1e-12 { scale / sd } else { 0.0 };
        for i in 0..n {
            scores[(i, j)] *= factor;
        }
    }
    Ok(scores)
}
