//! Single-modality sparse variational GP.
//!
//! `D` output dimensions share one kernel, one constant mean `m`, one noise
//! variance `σ²` and `M` inducing locations `v`. Output dimension `d` owns a
//! variational posterior `q(uᵈ) = N(μᵈ, Lᵈ·Lᵈᵀ)` over its inducing values.
//! Prior at the inducing points is `N(m·1, k(v,v))`; the parameterization is
//! not whitened.
//!
//! Gradients are derived by hand. The forward pass for any objective that is
//! a function of the per-point predictive marginals (mean and latent
//! variance) can be backpropagated with [`marginals_backward`], which is how
//! the ELBO, the cross-modal KL and latent inference share one derivation.

use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;

use crate::error::{GroveError, Result};
use crate::kernels::{kernel_diag, kernel_gradients, kernel_matrix, KernelSpec};
use crate::numerics::{cholesky, log_det, solve_triangular, CholeskyFactor, Matrix, TriangleSide};
use crate::par;

/// Floor applied to predictive variances that come out non-positive.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Output dimensions handled per parallel task. Fixed so that reductions
/// happen in the same order no matter how many threads run.
const DIM_CHUNK: usize = 8;

static NEGATIVE_VARIANCE_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of predictive variances clamped to [`VARIANCE_FLOOR`] so far in this process.
pub fn negative_variance_clamps() -> usize {
    NEGATIVE_VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariationalMode {
    Full,
    Diagonal,
}

impl std::str::FromStr for VariationalMode {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VariationalMode::Full),
            "diagonal" => Ok(VariationalMode::Diagonal),
            other => Err(GroveError::InvalidConfig(format!(
                "variational_mode: expected full or diagonal, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for VariationalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VariationalMode::Full => "full",
            VariationalMode::Diagonal => "diagonal",
        })
    }
}

/// Square-root factors of the variational covariances, one per output dim.
#[derive(Debug, Clone, PartialEq)]
pub enum VariationalCov {
    /// `D` lower-triangular `M×M` factors.
    Full(Vec<Matrix>),
    /// `D×M`; row `d` holds the (positive) diagonal of `Lᵈ`.
    Diagonal(Matrix),
}

impl VariationalCov {
    /// `scale·I` for every output dimension.
    pub fn scaled_identity(mode: VariationalMode, m: usize, d: usize, scale: f64) -> Self {
        match mode {
            VariationalMode::Full => {
                VariationalCov::Full((0..d).map(|_| Matrix::identity(m).scale(scale)).collect())
            }
            VariationalMode::Diagonal => VariationalCov::Diagonal(Matrix::from_fn(d, m, |_, _| scale)),
        }
    }

    pub fn mode(&self) -> VariationalMode {
        match self {
            VariationalCov::Full(_) => VariationalMode::Full,
            VariationalCov::Diagonal(_) => VariationalMode::Diagonal,
        }
    }

    pub fn out_dims(&self) -> usize {
        match self {
            VariationalCov::Full(v) => v.len(),
            VariationalCov::Diagonal(m) => m.rows(),
        }
    }

    /// `A·Lᵈ`.
    fn right_mul(&self, d: usize, a: &Matrix) -> Matrix {
        match self {
            VariationalCov::Full(ls) => a.matmul(&ls[d]).expect("A·L shape"),
            VariationalCov::Diagonal(diag) => {
                let l = diag.row(d);
                let mut out = a.clone();
                for i in 0..out.rows() {
                    out.row_mut(i).iter_mut().zip(l).for_each(|(v, s)| *v *= s);
                }
                out
            }
        }
    }

    /// `Sᵈ = Lᵈ·Lᵈᵀ` as a dense matrix.
    pub fn covariance(&self, d: usize) -> Matrix {
        match self {
            VariationalCov::Full(ls) => ls[d].matmul_t(&ls[d]).expect("square"),
            VariationalCov::Diagonal(diag) => {
                Matrix::diagonal(&diag.row(d).iter().map(|l| l * l).collect::<Vec<_>>())
            }
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            VariationalCov::Full(ls) => {
                VariationalCov::Full(ls.iter().map(|l| Matrix::zeros(l.rows(), l.cols())).collect())
            }
            VariationalCov::Diagonal(m) => VariationalCov::Diagonal(Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &VariationalCov) {
        match (self, other) {
            (VariationalCov::Full(a), VariationalCov::Full(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| x.axpy(alpha, y))
            }
            (VariationalCov::Diagonal(a), VariationalCov::Diagonal(b)) => a.axpy(alpha, b),
            _ => panic!("variational mode mismatch"),
        }
    }

    fn n_params(&self) -> usize {
        match self {
            VariationalCov::Full(ls) => ls.iter().map(|l| l.rows() * (l.rows() + 1) / 2).sum(),
            VariationalCov::Diagonal(m) => m.rows() * m.cols(),
        }
    }
}

/// One modality's sparse variational GP.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGp {
    pub kernel: KernelSpec,
    pub mean: f64,
    pub log_noise: f64,
    /// `M×Q` inducing locations.
    pub inducing: Matrix,
    /// `M×D`; column `d` is `μᵈ`.
    pub var_mean: Matrix,
    pub var_cov: VariationalCov,
}

/// Diagonal Gaussian predicted for one test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub includes_noise: bool,
}

/// Gradient of a scalar with respect to the unconstrained parameters of a
/// [`SparseGp`]: log lengthscale, log noise, mean, inducing locations,
/// variational means and the variational factors. Diagonal entries of the
/// factors are differentiated with respect to their logs, off-diagonal
/// entries directly.
#[derive(Debug, Clone, PartialEq)]
pub struct GpGrad {
    pub log_lengthscale: f64,
    pub log_noise: f64,
    pub mean: f64,
    pub inducing: Matrix,
    pub var_mean: Matrix,
    pub var_cov: VariationalCov,
}

impl SparseGp {
    pub fn new(
        kernel: KernelSpec,
        mean: f64,
        noise: f64,
        inducing: Matrix,
        var_mean: Matrix,
        var_cov: VariationalCov,
    ) -> Result<Self> {
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(GroveError::InvalidConfig(format!(
                "noise variance must be positive, got {noise}"
            )));
        }
        let gp = SparseGp {
            kernel,
            mean,
            log_noise: noise.ln(),
            inducing,
            var_mean,
            var_cov,
        };
        gp.validate()?;
        Ok(gp)
    }

    /// Checks shape and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.inducing.rows();
        if m == 0 {
            return Err(GroveError::ShapeMismatch("at least one inducing point required".into()));
        }
        if self.var_mean.rows() != m {
            return Err(GroveError::ShapeMismatch(format!(
                "variational mean has {} rows, expected {m}",
                self.var_mean.rows()
            )));
        }
        let d = self.var_mean.cols();
        if self.var_cov.out_dims() != d {
            return Err(GroveError::ShapeMismatch(format!(
                "{} variational factors for {d} output dims",
                self.var_cov.out_dims()
            )));
        }
        match &self.var_cov {
            VariationalCov::Full(ls) => {
                for l in ls {
                    if l.shape() != (m, m) {
                        return Err(GroveError::ShapeMismatch(format!(
                            "variational factor {:?}, expected {m}x{m}",
                            l.shape()
                        )));
                    }
                    if l.diag().iter().any(|v| !(*v > 0.0)) {
                        return Err(GroveError::NonFiniteValue(
                            "variational factor diagonal must be positive".into(),
                        ));
                    }
                }
            }
            VariationalCov::Diagonal(diag) => {
                if diag.cols() != m {
                    return Err(GroveError::ShapeMismatch(format!(
                        "diagonal factors have {} columns, expected {m}",
                        diag.cols()
                    )));
                }
                if diag.as_slice().iter().any(|v| !(*v > 0.0)) {
                    return Err(GroveError::NonFiniteValue(
                        "variational factor diagonal must be positive".into(),
                    ));
                }
            }
        }
        if !self.inducing.all_finite() || !self.var_mean.all_finite() || !self.mean.is_finite() {
            return Err(GroveError::NonFiniteValue("gp parameters".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn q_dim(&self) -> usize {
        self.inducing.cols()
    }

    pub fn out_dims(&self) -> usize {
        self.var_mean.cols()
    }

    pub fn mode(&self) -> VariationalMode {
        self.var_cov.mode()
    }

    /// Sets `q(uᵈ)` equal to the prior `N(m·1, k(v,v))` for every output dim.
    pub fn set_variational_to_prior(&mut self) -> Result<()> {
        let prior = PriorCache::new(self)?;
        let m = self.n_inducing();
        let d = self.out_dims();
        self.var_mean = Matrix::from_fn(m, d, |_, _| self.mean);
        self.var_cov = match self.mode() {
            VariationalMode::Full => VariationalCov::Full(vec![prior.chol.lower().clone(); d]),
            VariationalMode::Diagonal => {
                let s: Vec<f64> = prior.kmm.diag().iter().map(|v| v.sqrt()).collect();
                VariationalCov::Diagonal(Matrix::from_fn(d, m, |_, j| s[j]))
            }
        };
        Ok(())
    }

    /// Number of unconstrained parameters.
    pub fn n_params(&self) -> usize {
        3 + self.inducing.rows() * self.inducing.cols()
            + self.var_mean.rows() * self.var_mean.cols()
            + self.var_cov.n_params()
    }

    /// Unconstrained parameters in a fixed order:
    /// `[log ℓ, log σ², m, v…, μ…, factors…]`, factors listed per output
    /// dim with lower-triangular entries row by row (diagonal as logs).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.push(self.kernel.log_lengthscale);
        out.push(self.log_noise);
        out.push(self.mean);
        out.extend_from_slice(self.inducing.as_slice());
        out.extend_from_slice(self.var_mean.as_slice());
        flatten_cov(&self.var_cov, true, &mut out);
        out
    }

    /// Inverse of [`SparseGp::to_flat`]; consumes exactly `n_params()` values.
    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(GroveError::ShapeMismatch(format!(
                "gp expects {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        self.kernel.log_lengthscale = p[0];
        self.log_noise = p[1];
        self.mean = p[2];
        let mut at = 3;
        let n = self.inducing.rows() * self.inducing.cols();
        self.inducing.as_mut_slice().copy_from_slice(&p[at..at + n]);
        at += n;
        let n = self.var_mean.rows() * self.var_mean.cols();
        self.var_mean.as_mut_slice().copy_from_slice(&p[at..at + n]);
        at += n;
        match &mut self.var_cov {
            VariationalCov::Full(ls) => {
                for l in ls.iter_mut() {
                    for i in 0..l.rows() {
                        for j in 0..=i {
                            l[(i, j)] = if i == j { p[at].exp() } else { p[at] };
                            at += 1;
                        }
                    }
                }
            }
            VariationalCov::Diagonal(diag) => {
                for v in diag.as_mut_slice() {
                    *v = p[at].exp();
                    at += 1;
                }
            }
        }
        Ok(())
    }
}

fn flatten_cov(cov: &VariationalCov, diag_as_log: bool, out: &mut Vec<f64>) {
    match cov {
        VariationalCov::Full(ls) => {
            for l in ls {
                for i in 0..l.rows() {
                    for j in 0..=i {
                        let v = l[(i, j)];
                        out.push(if i == j && diag_as_log { v.ln() } else { v });
                    }
                }
            }
        }
        VariationalCov::Diagonal(diag) => {
            for v in diag.as_slice() {
                out.push(if diag_as_log { v.ln() } else { *v });
            }
        }
    }
}

impl GpGrad {
    /// Same ordering as [`SparseGp::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![self.log_lengthscale, self.log_noise, self.mean];
        out.extend_from_slice(self.inducing.as_slice());
        out.extend_from_slice(self.var_mean.as_slice());
        flatten_cov(&self.var_cov, false, &mut out);
        out
    }

    pub fn zeros_like(gp: &SparseGp) -> Self {
        GpGrad {
            log_lengthscale: 0.0,
            log_noise: 0.0,
            mean: 0.0,
            inducing: Matrix::zeros(gp.inducing.rows(), gp.inducing.cols()),
            var_mean: Matrix::zeros(gp.var_mean.rows(), gp.var_mean.cols()),
            var_cov: gp.var_cov.zeros_like(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &GpGrad) {
        self.log_lengthscale += alpha * other.log_lengthscale;
        self.log_noise += alpha * other.log_noise;
        self.mean += alpha * other.mean;
        self.inducing.axpy(alpha, &other.inducing);
        self.var_mean.axpy(alpha, &other.var_mean);
        self.var_cov.axpy(alpha, &other.var_cov);
    }

    pub fn scale(&mut self, s: f64) {
        self.log_lengthscale *= s;
        self.log_noise *= s;
        self.mean *= s;
        self.inducing.scale_mut(s);
        self.var_mean.scale_mut(s);
        match &mut self.var_cov {
            VariationalCov::Full(ls) => ls.iter_mut().for_each(|l| l.scale_mut(s)),
            VariationalCov::Diagonal(m) => m.scale_mut(s),
        }
    }
}

/// Factorized prior covariance at the inducing points.
#[derive(Debug, Clone)]
pub struct PriorCache {
    /// `k(v,v)` including whatever jitter the factorization needed.
    pub kmm: Matrix,
    pub chol: CholeskyFactor,
    pub kmm_inv: Matrix,
}

impl PriorCache {
    pub fn new(gp: &SparseGp) -> Result<Self> {
        let mut kmm = kernel_matrix(&gp.kernel, &gp.inducing, &gp.inducing)?;
        let chol = cholesky(&kmm, 0.0)?;
        kmm.add_diag(chol.jitter());
        let kmm_inv = chol.inverse();
        Ok(PriorCache { kmm, chol, kmm_inv })
    }
}

/// Predictive marginals of the latent function at a batch of points.
#[derive(Debug, Clone)]
pub struct Marginals {
    /// `B×D` means.
    pub mean: Matrix,
    /// `B×D` latent-function variances (no noise, not clamped).
    pub var: Matrix,
    knm: Matrix,
    a: Matrix,
}

/// Forward pass: `mean = m + A(μ − m·1)`, `var = k(x,x) − A(k(v,v) − S)Aᵀ`
/// (diagonal), with `A = k(x,v)·k(v,v)⁻¹`.
pub fn marginals(gp: &SparseGp, prior: &PriorCache, x: &Matrix) -> Result<Marginals> {
    if x.cols() != gp.q_dim() {
        return Err(GroveError::ShapeMismatch(format!(
            "latent points have {} dims, gp expects {}",
            x.cols(),
            gp.q_dim()
        )));
    }
    let knm = kernel_matrix(&gp.kernel, x, &gp.inducing)?;
    let a = prior.chol.solve(&knm.transpose())?.transpose();
    let delta = centered_var_mean(gp);
    let mut mean = a.matmul(&delta)?;
    mean.as_mut_slice().iter_mut().for_each(|v| *v += gp.mean);

    let knn = kernel_diag(&gp.kernel, x)?;
    let nystrom = a.row_dots(&knm);
    let base: Vec<f64> = knn.iter().zip(&nystrom).map(|(k, q)| k - q).collect();
    let b = x.rows();
    let d_out = gp.out_dims();
    let chunks = par::map_range(n_chunks(d_out), |c| {
        dim_range(c, d_out)
            .map(|d| {
                let p = gp.var_cov.right_mul(d, &a);
                (0..b).map(|i| p.row(i).iter().map(|v| v * v).sum::<f64>()).collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    });
    let mut var = Matrix::zeros(b, d_out);
    for (d, col) in chunks.into_iter().flatten().enumerate() {
        for i in 0..b {
            var[(i, d)] = base[i] + col[i];
        }
    }
    Ok(Marginals { mean, var, knm, a })
}

fn centered_var_mean(gp: &SparseGp) -> Matrix {
    let mut delta = gp.var_mean.clone();
    delta.as_mut_slice().iter_mut().for_each(|v| *v -= gp.mean);
    delta
}

fn n_chunks(d: usize) -> usize {
    d.div_ceil(DIM_CHUNK)
}

fn dim_range(chunk: usize, d: usize) -> std::ops::Range<usize> {
    chunk * DIM_CHUNK..((chunk + 1) * DIM_CHUNK).min(d)
}

/// Accumulates gradients of some scalar objective with respect to the GP's
/// parameters, deferring the `k(v,v)` chain rule until [`GradAccum::finish`].
#[derive(Debug, Clone)]
pub struct GradAccum {
    g_kmm: Matrix,
    g_ell: f64,
    g_log_noise: f64,
    g_mean_direct: f64,
    g_inducing: Matrix,
    g_delta: Matrix,
    g_cov: VariationalCov,
}

impl GradAccum {
    pub fn new(gp: &SparseGp) -> Self {
        let m = gp.n_inducing();
        GradAccum {
            g_kmm: Matrix::zeros(m, m),
            g_ell: 0.0,
            g_log_noise: 0.0,
            g_mean_direct: 0.0,
            g_inducing: Matrix::zeros(m, gp.q_dim()),
            g_delta: Matrix::zeros(m, gp.out_dims()),
            g_cov: gp.var_cov.zeros_like(),
        }
    }

    pub fn add_log_noise(&mut self, g: f64) {
        self.g_log_noise += g;
    }

    /// Completes the chain rule through `k(v,v)` and the log/positivity
    /// reparameterizations.
    pub fn finish(self, gp: &SparseGp) -> Result<GpGrad> {
        let kg = kernel_gradients(&gp.kernel, &gp.inducing, &gp.inducing, &self.g_kmm)?;
        let ell = gp.kernel.lengthscale();
        let mut inducing = self.g_inducing;
        inducing.add_assign(&kg.d_a);
        inducing.add_assign(&kg.d_b);
        let mean = self.g_mean_direct - self.g_delta.sum();
        let mut var_cov = self.g_cov;
        match (&mut var_cov, &gp.var_cov) {
            (VariationalCov::Full(gs), VariationalCov::Full(ls)) => {
                for (g, l) in gs.iter_mut().zip(ls) {
                    *g = g.lower_triangle();
                    for i in 0..l.rows() {
                        g[(i, i)] *= l[(i, i)];
                    }
                }
            }
            (VariationalCov::Diagonal(g), VariationalCov::Diagonal(l)) => {
                g.as_mut_slice()
                    .iter_mut()
                    .zip(l.as_slice())
                    .for_each(|(gv, lv)| *gv *= lv);
            }
            _ => unreachable!("accumulator built from the same gp"),
        }
        Ok(GpGrad {
            log_lengthscale: (self.g_ell + kg.d_lengthscale) * ell,
            log_noise: self.g_log_noise,
            mean,
            inducing,
            var_mean: self.g_delta,
            var_cov,
        })
    }
}

/// Backpropagates upstream gradients on the marginal means and variances
/// (both `B×D`) into `acc`, returning the gradient with respect to `x`.
pub fn marginals_backward(
    gp: &SparseGp,
    prior: &PriorCache,
    x: &Matrix,
    marg: &Marginals,
    g_mean: &Matrix,
    g_var: &Matrix,
    acc: &mut GradAccum,
) -> Result<Matrix> {
    let b = x.rows();
    let d_out = gp.out_dims();
    if g_mean.shape() != (b, d_out) || g_var.shape() != (b, d_out) {
        return Err(GroveError::ShapeMismatch("marginal upstream shape".into()));
    }
    let a = &marg.a;
    let delta = centered_var_mean(gp);

    // Mean path.
    acc.g_delta.add_assign(&a.t_matmul(g_mean)?);
    acc.g_mean_direct += g_mean.sum();
    let mut g_a = g_mean.matmul_t(&delta)?;

    // Variance path: var_i = k_ii + A_i (S − K_mm) A_iᵀ.
    let gv_sum: Vec<f64> = (0..b).map(|i| g_var.row(i).iter().sum()).collect();
    for i in 0..b {
        let s = -2.0 * gv_sum[i];
        for (ga, k) in g_a.row_mut(i).iter_mut().zip(marg.knm.row(i)) {
            *ga += s * k;
        }
    }
    let mut weighted_a = a.clone();
    for i in 0..b {
        let s = gv_sum[i];
        weighted_a.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    acc.g_kmm.axpy(-1.0, &a.t_matmul(&weighted_a)?);

    let chunks = par::map_range(n_chunks(d_out), |c| {
        let mut ga = Matrix::zeros(b, gp.n_inducing());
        let mut gl = Vec::new();
        for d in dim_range(c, d_out) {
            let mut w = gp.var_cov.right_mul(d, a);
            for i in 0..b {
                let s = 2.0 * g_var[(i, d)];
                w.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
            match &gp.var_cov {
                VariationalCov::Full(ls) => {
                    ga.add_assign(&w.matmul_t(&ls[d]).expect("shape"));
                    gl.push(a.t_matmul(&w).expect("shape"));
                }
                VariationalCov::Diagonal(diag) => {
                    let l = diag.row(d);
                    for i in 0..b {
                        ga.row_mut(i)
                            .iter_mut()
                            .zip(w.row(i))
                            .zip(l)
                            .for_each(|((g, wv), lv)| *g += wv * lv);
                    }
                    let col: Vec<f64> = (0..gp.n_inducing())
                        .map(|j| (0..b).map(|i| a[(i, j)] * w[(i, j)]).sum())
                        .collect();
                    gl.push(Matrix::from_rows(&[col]));
                }
            }
        }
        (ga, gl)
    });
    let mut d = 0;
    for (ga, gl) in chunks {
        g_a.add_assign(&ga);
        for g in gl {
            match &mut acc.g_cov {
                VariationalCov::Full(gs) => gs[d].add_assign(&g),
                VariationalCov::Diagonal(gs) => gs
                    .row_mut(d)
                    .iter_mut()
                    .zip(g.as_slice())
                    .for_each(|(x, y)| *x += y),
            }
            d += 1;
        }
    }

    // A = K_nm K_mm⁻¹.
    let g_knm = g_a.matmul(&prior.kmm_inv)?;
    acc.g_kmm.axpy(-1.0, &a.t_matmul(&g_knm)?);
    let kg = kernel_gradients(&gp.kernel, x, &gp.inducing, &g_knm)?;
    acc.g_ell += kg.d_lengthscale;
    acc.g_inducing.add_assign(&kg.d_b);
    Ok(kg.d_a)
}

/// `Σ_d KL(q(uᵈ) ‖ p(uᵈ))`, optionally accumulating `scale · ∂KL` into `acc`.
fn kl_terms(gp: &SparseGp, prior: &PriorCache, grad: Option<(f64, &mut GradAccum)>) -> Result<f64> {
    let m = gp.n_inducing();
    let d_out = gp.out_dims();
    let delta = centered_var_mean(gp);
    let kinv_delta = prior.chol.solve(&delta)?;
    let quad: f64 = delta
        .as_slice()
        .iter()
        .zip(kinv_delta.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let logdet_k = log_det(&prior.chol);
    let want_grad = grad.is_some();
    let kinv_diag = prior.kmm_inv.diag();

    // Per dim: (trace term, log det S, ∂KL/∂L, S).
    let per_chunk = par::map_range(n_chunks(d_out), |c| {
        dim_range(c, d_out)
            .map(|d| match &gp.var_cov {
                VariationalCov::Full(ls) => {
                    let l = &ls[d];
                    let t = solve_triangular(&prior.chol, l, TriangleSide::Lower).expect("shape");
                    let tr = t.frobenius_norm().powi(2);
                    let logdet_s = 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
                    let extra = want_grad.then(|| {
                        let mut g = prior.kmm_inv.matmul(l).expect("shape").lower_triangle();
                        for i in 0..m {
                            g[(i, i)] -= 1.0 / l[(i, i)];
                        }
                        (g, l.matmul_t(l).expect("shape"))
                    });
                    (tr, logdet_s, extra)
                }
                VariationalCov::Diagonal(diag) => {
                    let l = diag.row(d);
                    let tr: f64 = l.iter().zip(&kinv_diag).map(|(v, k)| k * v * v).sum();
                    let logdet_s = 2.0 * l.iter().map(|v| v.ln()).sum::<f64>();
                    let extra = want_grad.then(|| {
                        let g: Vec<f64> = l
                            .iter()
                            .zip(&kinv_diag)
                            .map(|(v, k)| k * v - 1.0 / v)
                            .collect();
                        let s: Vec<f64> = l.iter().map(|v| v * v).collect();
                        (Matrix::from_rows(&[g]), Matrix::diagonal(&s))
                    });
                    (tr, logdet_s, extra)
                }
            })
            .collect::<Vec<_>>()
    });

    let mut trace = 0.0;
    let mut logdet_s = 0.0;
    let mut s_sum = want_grad.then(|| Matrix::zeros(m, m));
    let mut g_cov = want_grad.then(|| gp.var_cov.zeros_like());
    for (d, (tr, ld, extra)) in per_chunk.into_iter().flatten().enumerate() {
        trace += tr;
        logdet_s += ld;
        if let Some((g, s)) = extra {
            s_sum.as_mut().expect("grad").add_assign(&s);
            match g_cov.as_mut().expect("grad") {
                VariationalCov::Full(gs) => gs[d] = g,
                VariationalCov::Diagonal(gs) => gs.row_mut(d).copy_from_slice(g.as_slice()),
            }
        }
    }
    let kl = 0.5 * (trace + quad - (d_out * m) as f64 + d_out as f64 * logdet_k - logdet_s);

    if let Some((scale, acc)) = grad {
        acc.g_delta.axpy(scale, &kinv_delta);
        acc.g_cov.axpy(scale, g_cov.as_ref().expect("grad"));
        let mut inner = s_sum.expect("grad");
        inner.add_assign(&delta.matmul_t(&delta)?);
        let mut g_kmm = prior.kmm_inv.matmul(&inner)?.matmul(&prior.kmm_inv)?;
        g_kmm.scale_mut(-0.5);
        g_kmm.axpy(0.5 * d_out as f64, &prior.kmm_inv);
        acc.g_kmm.axpy(scale, &g_kmm);
    }
    Ok(kl)
}

/// `Σ_d KL(N(μᵈ, Sᵈ) ‖ N(m·1, k(v,v)))`.
pub fn kl_inducing(gp: &SparseGp) -> Result<f64> {
    let prior = PriorCache::new(gp)?;
    kl_terms(gp, &prior, None)
}

/// As [`kl_inducing`] with a prior cache, accumulating `scale · ∂KL`.
pub fn kl_inducing_with_grad(
    gp: &SparseGp,
    prior: &PriorCache,
    scale: f64,
    acc: &mut GradAccum,
) -> Result<f64> {
    kl_terms(gp, prior, Some((scale, acc)))
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Closed-form `E_q[log N(z | g, σ²)]` summed over a batch, its gradients
/// with respect to the marginals, and `∂/∂log σ²`.
pub fn expected_log_lik(
    marg: &Marginals,
    z: &Matrix,
    noise: f64,
    scale: f64,
) -> (f64, Matrix, Matrix, f64) {
    let (b, d) = z.shape();
    let mut value = 0.0;
    let mut g_mean = Matrix::zeros(b, d);
    let mut g_var = Matrix::zeros(b, d);
    let mut g_log_noise = 0.0;
    let half_ln = 0.5 * (LN_2PI + noise.ln());
    for i in 0..b {
        for j in 0..d {
            let r = z[(i, j)] - marg.mean[(i, j)];
            let q = r * r + marg.var[(i, j)];
            value += -half_ln - 0.5 * q / noise;
            g_mean[(i, j)] = scale * r / noise;
            g_var[(i, j)] = -0.5 * scale / noise;
            g_log_noise += scale * (-0.5 + 0.5 * q / noise);
        }
    }
    (scale * value, g_mean, g_var, g_log_noise)
}

fn check_batch(gp: &SparseGp, x: &Matrix, z: &Matrix, n_total: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(GroveError::EmptyDataset("elbo batch is empty".into()));
    }
    if x.rows() != z.rows() || z.cols() != gp.out_dims() {
        return Err(GroveError::ShapeMismatch(format!(
            "batch latents {:?} vs targets {:?} (gp has {} outputs)",
            x.shape(),
            z.shape(),
            gp.out_dims()
        )));
    }
    if n_total < x.rows() {
        return Err(GroveError::ShapeMismatch(format!(
            "n_total {n_total} smaller than batch {}",
            x.rows()
        )));
    }
    Ok(())
}

/// ELBO value and gradients.
#[derive(Debug, Clone)]
pub struct ElboOutput {
    pub value: f64,
    pub grad: GpGrad,
    /// `B×Q` gradient with respect to the batch latents.
    pub grad_x: Matrix,
}

/// `Σ_d [ (N/B)·Σ_batch E_q log p(zᵈ|gᵈ) − KL(q(uᵈ)‖p(uᵈ)) ]` without gradients.
pub fn elbo_value(gp: &SparseGp, x: &Matrix, z: &Matrix, n_total: usize) -> Result<f64> {
    check_batch(gp, x, z, n_total)?;
    let prior = PriorCache::new(gp)?;
    let marg = marginals(gp, &prior, x)?;
    let scale = n_total as f64 / x.rows() as f64;
    let (lik, ..) = expected_log_lik(&marg, z, gp.noise(), scale);
    Ok(lik - kl_terms(gp, &prior, None)?)
}

/// Minibatch ELBO with the expectation term scaled by `n_total / B`.
pub fn elbo(gp: &SparseGp, x: &Matrix, z: &Matrix, n_total: usize) -> Result<ElboOutput> {
    check_batch(gp, x, z, n_total)?;
    let prior = PriorCache::new(gp)?;
    let mut acc = GradAccum::new(gp);
    let (value, grad_x) = elbo_accumulate(gp, &prior, x, z, n_total, 1.0, &mut acc)?;
    Ok(ElboOutput {
        value,
        grad: acc.finish(gp)?,
        grad_x,
    })
}

/// Adds `weight · ∂ELBO` into `acc`; returns the ELBO value and `weight · ∂ELBO/∂x`.
pub fn elbo_accumulate(
    gp: &SparseGp,
    prior: &PriorCache,
    x: &Matrix,
    z: &Matrix,
    n_total: usize,
    weight: f64,
    acc: &mut GradAccum,
) -> Result<(f64, Matrix)> {
    check_batch(gp, x, z, n_total)?;
    let marg = marginals(gp, prior, x)?;
    let scale = n_total as f64 / x.rows() as f64;
    let (lik, mut g_mean, mut g_var, g_ln) = expected_log_lik(&marg, z, gp.noise(), scale);
    g_mean.scale_mut(weight);
    g_var.scale_mut(weight);
    acc.add_log_noise(weight * g_ln);
    let gx = marginals_backward(gp, prior, x, &marg, &g_mean, &g_var, acc)?;
    let kl = kl_inducing_with_grad(gp, prior, -weight, acc)?;
    Ok((lik - kl, gx))
}

/// Predictive diagonal Gaussians at each row of `x_star`.
pub fn predict(gp: &SparseGp, x_star: &Matrix, with_noise: bool) -> Result<Vec<PredictiveGaussian>> {
    let prior = PriorCache::new(gp)?;
    predict_with(gp, &prior, x_star, with_noise)
}

pub fn predict_with(
    gp: &SparseGp,
    prior: &PriorCache,
    x_star: &Matrix,
    with_noise: bool,
) -> Result<Vec<PredictiveGaussian>> {
    let marg = marginals(gp, prior, x_star)?;
    let noise = if with_noise { gp.noise() } else { 0.0 };
    Ok((0..x_star.rows())
        .map(|i| PredictiveGaussian {
            mean: marg.mean.row(i).to_vec(),
            variance: marg.var.row(i).iter().map(|v| clamp_variance(*v) + noise).collect(),
            includes_noise: with_noise,
        })
        .collect())
}

/// Floors a latent variance at [`VARIANCE_FLOOR`], counting each clamp.
pub fn clamp_variance(v: f64) -> f64 {
    if v > VARIANCE_FLOOR {
        v
    } else {
        let n = NEGATIVE_VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
        if n < 10 {
            warn!("predictive variance {v:e} clamped to {VARIANCE_FLOOR:e}");
        }
        VARIANCE_FLOOR
    }
}
