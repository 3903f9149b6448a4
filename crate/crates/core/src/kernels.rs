//! Covariance functions over latent points.
//!
//! Hyperparameters are stored as logs so unconstrained optimizer updates keep
//! them positive. All four families are isotropic: a single lengthscale is
//! shared by every latent dimension.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern15,
    Matern25,
    Cosine,
}

impl KernelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern15 => "matern15",
            KernelFamily::Matern25 => "matern25",
            KernelFamily::Cosine => "cosine",
        }
    }

    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Rbf,
        KernelFamily::Matern15,
        KernelFamily::Matern25,
        KernelFamily::Cosine,
    ];
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelFamily {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern15" => Ok(KernelFamily::Matern15),
            "matern25" => Ok(KernelFamily::Matern25),
            "cosine" => Ok(KernelFamily::Cosine),
            other => Err(GroveError::InvalidConfig(format!(
                "kernel: unknown family {other:?} (expected rbf, matern15, matern25 or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub log_lengthscale: f64,
    pub log_output_scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale: f64) -> Result<Self> {
        Self::with_output_scale(family, lengthscale, 1.0)
    }

    pub fn with_output_scale(family: KernelFamily, lengthscale: f64, output_scale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(GroveError::InvalidConfig(format!(
                "lengthscale must be positive, got {lengthscale}"
            )));
        }
        if !(output_scale > 0.0) || !output_scale.is_finite() {
            return Err(GroveError::InvalidConfig(format!(
                "output_scale must be positive, got {output_scale}"
            )));
        }
        Ok(KernelSpec {
            family,
            log_lengthscale: lengthscale.ln(),
            log_output_scale: output_scale.ln(),
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn output_scale(&self) -> f64 {
        self.log_output_scale.exp()
    }
}

/// Gradients of `Σᵢⱼ U[i,j]·k(aᵢ, bⱼ)` for an upstream matrix `U`.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    /// Derivative with respect to the lengthscale itself (not its log).
    pub d_lengthscale: f64,
    pub d_a: Matrix,
    pub d_b: Matrix,
}

fn check_inputs(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(GroveError::ShapeMismatch(format!(
            "kernel inputs have {} and {} latent dims",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn norms(m: &Matrix) -> Result<Vec<f64>> {
    (0..m.rows())
        .map(|i| {
            let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(GroveError::NonFiniteValue(format!(
                    "cosine kernel on zero-norm input row {i}"
                )))
            }
        })
        .collect()
}

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Per-pair terms for the stationary families, as a function of squared
/// distance: `(k, c, dk_dl)` where `∂k/∂a = c·(a − b)`.
#[inline]
fn stationary_terms(family: KernelFamily, r2: f64, ell: f64, s: f64) -> (f64, f64, f64) {
    match family {
        KernelFamily::Rbf => {
            let k = s * (-0.5 * r2 / (ell * ell)).exp();
            (k, -k / (ell * ell), k * r2 / (ell * ell * ell))
        }
        KernelFamily::Matern15 => {
            let u = SQRT3 * r2.sqrt() / ell;
            let e = (-u).exp();
            let k = s * (1.0 + u) * e;
            (k, -s * 3.0 / (ell * ell) * e, s * u * u * e / ell)
        }
        KernelFamily::Matern25 => {
            let u = SQRT5 * r2.sqrt() / ell;
            let e = (-u).exp();
            let k = s * (1.0 + u + u * u / 3.0) * e;
            (
                k,
                -s * e * (1.0 + u) * 5.0 / (3.0 * ell * ell),
                s * e * u * u * (1.0 + u) / (3.0 * ell),
            )
        }
        KernelFamily::Cosine => unreachable!("cosine is not stationary"),
    }
}

/// `K[i,j] = k(aᵢ, bⱼ)`.
pub fn kernel_matrix(spec: &KernelSpec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_inputs(a, b)?;
    let s = spec.output_scale();
    if spec.family == KernelFamily::Cosine {
        let na = norms(a)?;
        let nb = norms(b)?;
        return Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            s * dot / (na[i] * nb[j])
        }));
    }
    let ell = spec.lengthscale();
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        stationary_terms(spec.family, sq_dist(a.row(i), b.row(j)), ell, s).0
    }))
}

/// `k(aᵢ, aᵢ)` for every row.
pub fn kernel_diag(spec: &KernelSpec, a: &Matrix) -> Result<Vec<f64>> {
    if spec.family == KernelFamily::Cosine {
        norms(a)?;
    }
    Ok(vec![spec.output_scale(); a.rows()])
}

/// Backpropagates `upstream` (same shape as `kernel_matrix(spec, a, b)`).
///
/// The cosine family has no lengthscale; its `d_lengthscale` is always zero.
pub fn kernel_gradients(
    spec: &KernelSpec,
    a: &Matrix,
    b: &Matrix,
    upstream: &Matrix,
) -> Result<KernelGrad> {
    check_inputs(a, b)?;
    if upstream.shape() != (a.rows(), b.rows()) {
        return Err(GroveError::ShapeMismatch(format!(
            "kernel upstream {:?}, expected {:?}",
            upstream.shape(),
            (a.rows(), b.rows())
        )));
    }
    let q = a.cols();
    let s = spec.output_scale();
    let mut d_a = Matrix::zeros(a.rows(), q);
    let mut d_b = Matrix::zeros(b.rows(), q);
    let mut d_ell = 0.0;

    if spec.family == KernelFamily::Cosine {
        let na = norms(a)?;
        let nb = norms(b)?;
        for i in 0..a.rows() {
            let ai = a.row(i);
            for j in 0..b.rows() {
                let u = upstream[(i, j)];
                if u == 0.0 {
                    continue;
                }
                let bj = b.row(j);
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                let inv = 1.0 / (na[i] * nb[j]);
                let ca = dot / (na[i] * na[i]);
                let cb = dot / (nb[j] * nb[j]);
                for t in 0..q {
                    d_a[(i, t)] += u * s * inv * (bj[t] - ca * ai[t]);
                    d_b[(j, t)] += u * s * inv * (ai[t] - cb * bj[t]);
                }
            }
        }
        return Ok(KernelGrad {
            d_lengthscale: 0.0,
            d_a,
            d_b,
        });
    }

    let ell = spec.lengthscale();
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            let u = upstream[(i, j)];
            if u == 0.0 {
                continue;
            }
            let bj = b.row(j);
            let (_, c, dl) = stationary_terms(spec.family, sq_dist(ai, bj), ell, s);
            d_ell += u * dl;
            for t in 0..q {
                let g = u * c * (ai[t] - bj[t]);
                d_a[(i, t)] += g;
                d_b[(j, t)] -= g;
            }
        }
    }
    Ok(KernelGrad {
        d_lengthscale: d_ell,
        d_a,
        d_b,
    })
}
