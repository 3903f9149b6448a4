//! Post-training latent inference: a new deterministic embedding `z*` is
//! mapped to a latent point `x*` by maximizing its likelihood under one
//! modality's GP, and the GP's predictive at `x*` becomes the probabilistic
//! embedding.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::gplvm::{adam_step, AdamConfig, AdamState, GroveModel, Modality, TrainConfig};
use crate::kernels::{kernel_gradients, kernel_matrix};
use crate::numerics::Matrix;
use crate::par;
use crate::svgp::{clamp_variance, PriorCache, SparseGp, VariationalCov, VARIANCE_FLOOR};

/// What the latent fit maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentObjective {
    /// `log N(z*; μ(x), diag(σ_f²(x) + σ²))`.
    #[default]
    PredictiveDensity,
    /// `E_{f~q(f|x)} log N(z*; f, σ²I)`, the single-point likelihood term of
    /// the training bound.
    ExpectedLogLik,
}

impl fmt::Display for LatentObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentObjective::PredictiveDensity => "predictive_density",
            LatentObjective::ExpectedLogLik => "expected_log_lik",
        })
    }
}

impl FromStr for LatentObjective {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictive_density" => Ok(LatentObjective::PredictiveDensity),
            "expected_log_lik" => Ok(LatentObjective::ExpectedLogLik),
            other => Err(GroveError::InvalidConfig(format!(
                "objective: expected predictive_density or expected_log_lik, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentFitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Restart points are drawn from `N(0, init_scale²·I)`.
    pub init_scale: f64,
    pub seed: u64,
    pub objective: LatentObjective,
    /// Whether the returned embedding variance includes the noise variance.
    pub with_noise: bool,
}

impl Default for LatentFitConfig {
    fn default() -> Self {
        LatentFitConfig {
            restarts: 4,
            steps: 200,
            learning_rate: 1e-2,
            init_scale: 0.1,
            seed: 0,
            objective: LatentObjective::PredictiveDensity,
            with_noise: false,
        }
    }
}

impl LatentFitConfig {
    /// Defaults with the step size, restart scale and objective recorded in
    /// a training configuration.
    pub fn for_model(config: &TrainConfig) -> Self {
        LatentFitConfig {
            learning_rate: config.fit_learning_rate,
            init_scale: config.fit_init_scale,
            objective: config.fit_objective,
            ..LatentFitConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 {
            return Err(GroveError::InvalidConfig("restarts and steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(GroveError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(GroveError::InvalidConfig(format!(
                "init_scale must be nonnegative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFit {
    pub x: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticEmbedding {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Arithmetic mean of `variance`.
    pub uncertainty: f64,
    pub modality: Modality,
    /// Latent-fit objective at the chosen `x*`.
    pub source_objective: f64,
}

impl ProbabilisticEmbedding {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Deterministic per-row seed used by [`batch_embed`].
pub fn row_seed(seed: u64, row: usize) -> u64 {
    let mut z = seed ^ (row as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Single-point predictor for one GP, with the prior factorization and
/// `k(v,v)⁻¹(μ − m)` computed once.
#[derive(Debug, Clone)]
pub struct PointPredictor<'a> {
    gp: &'a SparseGp,
    prior: PriorCache,
    /// `M×D`: `k(v,v)⁻¹(μ − m·1)`.
    alpha: Matrix,
}

/// Mean and latent variance at one point with the intermediates the
/// backward pass needs.
struct PointForward {
    mean: Vec<f64>,
    var: Vec<f64>,
    k: Matrix,
    a: Vec<f64>,
    /// `Lᵈᵀa` per output dim.
    w: Vec<Vec<f64>>,
}

impl<'a> PointPredictor<'a> {
    pub fn new(gp: &'a SparseGp) -> Result<Self> {
        let prior = PriorCache::new(gp)?;
        let mut delta = gp.var_mean.clone();
        delta.as_mut_slice().iter_mut().for_each(|v| *v -= gp.mean);
        let alpha = prior.chol.solve(&delta)?;
        Ok(PointPredictor { gp, prior, alpha })
    }

    pub fn gp(&self) -> &SparseGp {
        self.gp
    }

    fn forward(&self, x: &[f64]) -> Result<PointForward> {
        let gp = self.gp;
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let k = kernel_matrix(&gp.kernel, &xm, &gp.inducing)?;
        let a = self.prior.kmm_inv.matmul(&k.transpose())?.into_vec();
        let kxx = crate::kernels::kernel_diag(&gp.kernel, &xm)?[0];
        let nystrom: f64 = k.as_slice().iter().zip(&a).map(|(p, q)| p * q).sum();
        let mean = (0..gp.out_dims())
            .map(|d| gp.mean + (0..a.len()).map(|j| k.as_slice()[j] * self.alpha[(j, d)]).sum::<f64>())
            .collect();
        let w = lt_times(&gp.var_cov, &a);
        let var = w
            .iter()
            .map(|wd| kxx - nystrom + wd.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok(PointForward { mean, var, k, a, w })
    }

    /// Predictive mean and latent-function variance at `x` (not clamped, no noise).
    pub fn mean_var(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.forward(x)?;
        Ok((f.mean, f.var))
    }

    fn objective_parts(&self, fwd: &PointForward, z: &[f64], objective: LatentObjective) -> (f64, Vec<f64>, Vec<f64>) {
        let noise = self.gp.noise();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let d = z.len();
        let mut value = 0.0;
        let mut g_mean = vec![0.0; d];
        let mut g_var = vec![0.0; d];
        for j in 0..d {
            let r = z[j] - fwd.mean[j];
            let raw = fwd.var[j];
            let v = clamp_variance(raw);
            let live = raw > VARIANCE_FLOOR;
            match objective {
                LatentObjective::PredictiveDensity => {
                    let tau = v + noise;
                    value += -0.5 * (ln2pi + tau.ln()) - r * r / (2.0 * tau);
                    g_mean[j] = r / tau;
                    if live {
                        g_var[j] = -0.5 / tau + r * r / (2.0 * tau * tau);
                    }
                }
                LatentObjective::ExpectedLogLik => {
                    value += -0.5 * (ln2pi + noise.ln()) - (r * r + v) / (2.0 * noise);
                    g_mean[j] = r / noise;
                    if live {
                        g_var[j] = -0.5 / noise;
                    }
                }
            }
        }
        (value, g_mean, g_var)
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &[f64], z: &[f64], objective: LatentObjective) -> Result<f64> {
        self.check_z(z)?;
        let fwd = self.forward(x)?;
        Ok(self.objective_parts(&fwd, z, objective).0)
    }

    /// Objective value and its gradient with respect to `x`.
    pub fn objective_grad(&self, x: &[f64], z: &[f64], objective: LatentObjective) -> Result<(f64, Vec<f64>)> {
        self.check_z(z)?;
        let gp = self.gp;
        let fwd = self.forward(x)?;
        let (value, g_mean, g_var) = self.objective_parts(&fwd, z, objective);
        let m = fwd.a.len();

        // ∂/∂k: mean contributes α·g_mean; each variance contributes
        // −2a·g_var + 2·k(v,v)⁻¹ Lᵈ wᵈ·g_var.
        let g_sum: f64 = g_var.iter().sum();
        let mut gk: Vec<f64> = (0..m)
            .map(|j| {
                self.alpha.row(j).iter().zip(&g_mean).map(|(p, q)| p * q).sum::<f64>() - 2.0 * g_sum * fwd.a[j]
            })
            .collect();
        let mut r = vec![0.0; m];
        for (d, wd) in fwd.w.iter().enumerate() {
            if g_var[d] != 0.0 {
                l_times_acc(&gp.var_cov, d, wd, 2.0 * g_var[d], &mut r);
            }
        }
        let kinv_r = self.prior.kmm_inv.matmul(&Matrix::column(&r))?;
        gk.iter_mut().zip(kinv_r.as_slice()).for_each(|(g, v)| *g += v);

        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let upstream = Matrix::from_vec(1, m, gk)?;
        let kg = kernel_gradients(&gp.kernel, &xm, &gp.inducing, &upstream)?;
        debug_assert_eq!(fwd.k.cols(), m);
        // k(x,x) is constant in x for every supported kernel.
        Ok((value, kg.d_a.into_vec()))
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.gp.out_dims() {
            return Err(GroveError::ShapeMismatch(format!(
                "embedding has {} dims, gp expects {}",
                z.len(),
                self.gp.out_dims()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GroveError::NonFiniteValue("query embedding".into()));
        }
        Ok(())
    }

    /// Adam ascent from `x0` for `steps` steps; returns the best iterate seen.
    pub fn ascend(&self, x0: &[f64], z: &[f64], cfg: &LatentFitConfig, restart: usize) -> Result<LatentFit> {
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(x0.len());
        let mut x = x0.to_vec();
        let mut best = LatentFit {
            x: x.clone(),
            objective: f64::NEG_INFINITY,
        };
        for step in 0..=cfg.steps {
            let (value, grad) = self.objective_grad(&x, z, cfg.objective)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(GroveError::NonFiniteLoss {
                    epoch: restart,
                    batch: step,
                });
            }
            if value > best.objective {
                best = LatentFit {
                    x: x.clone(),
                    objective: value,
                };
            }
            if step == cfg.steps {
                break;
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            adam_step(&mut x, &neg, &mut state, &adam)?;
        }
        Ok(best)
    }

    /// Best fit over `cfg.restarts` seeded restarts.
    pub fn infer(&self, z: &[f64], cfg: &LatentFitConfig) -> Result<LatentFit> {
        cfg.validate()?;
        self.check_z(z)?;
        let q = self.gp.q_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut best: Option<LatentFit> = None;
        for r in 0..cfg.restarts {
            let x0: Vec<f64> = (0..q)
                .map(|_| {
                    let s: f64 = StandardNormal.sample(&mut rng);
                    s * cfg.init_scale
                })
                .collect();
            let fit = self.ascend(&x0, z, cfg, r)?;
            if best.as_ref().is_none_or(|b| fit.objective > b.objective) {
                best = Some(fit);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    pub fn embed(&self, z: &[f64], modality: Modality, cfg: &LatentFitConfig) -> Result<ProbabilisticEmbedding> {
        let fit = self.infer(z, cfg)?;
        let (mean, var) = self.mean_var(&fit.x)?;
        let noise = if cfg.with_noise { self.gp.noise() } else { 0.0 };
        let variance: Vec<f64> = var.into_iter().map(|v| clamp_variance(v) + noise).collect();
        let uncertainty = variance.iter().sum::<f64>() / variance.len() as f64;
        Ok(ProbabilisticEmbedding {
            mean,
            variance,
            uncertainty,
            modality,
            source_objective: fit.objective,
        })
    }
}

/// `Lᵈᵀa` for every output dim `d`.
fn lt_times(cov: &VariationalCov, a: &[f64]) -> Vec<Vec<f64>> {
    match cov {
        VariationalCov::Full(ls) => ls
            .iter()
            .map(|l| {
                let m = a.len();
                (0..m).map(|i| (i..m).map(|j| l[(j, i)] * a[j]).sum()).collect()
            })
            .collect(),
        VariationalCov::Diagonal(diag) => (0..diag.rows())
            .map(|d| diag.row(d).iter().zip(a).map(|(l, v)| l * v).collect())
            .collect(),
    }
}

/// `out += s·Lᵈ w`.
fn l_times_acc(cov: &VariationalCov, d: usize, w: &[f64], s: f64, out: &mut [f64]) {
    match cov {
        VariationalCov::Full(ls) => {
            let l = &ls[d];
            for (j, o) in out.iter_mut().enumerate() {
                *o += s * l.row(j)[..=j].iter().zip(w).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        VariationalCov::Diagonal(diag) => {
            for ((o, l), v) in out.iter_mut().zip(diag.row(d)).zip(w) {
                *o += s * l * v;
            }
        }
    }
}

/// Fits `x*` for one embedding under the chosen modality's GP.
pub fn infer_latent(model: &GroveModel, z_star: &[f64], modality: Modality, cfg: &LatentFitConfig) -> Result<LatentFit> {
    PointPredictor::new(model.gp(modality))?.infer(z_star, cfg)
}

pub fn embed(
    model: &GroveModel,
    z_star: &[f64],
    modality: Modality,
    cfg: &LatentFitConfig,
) -> Result<ProbabilisticEmbedding> {
    PointPredictor::new(model.gp(modality))?.embed(z_star, modality, cfg)
}

/// Embeds every row of `z`; row `i` uses seed [`row_seed`]`(cfg.seed, i)`, so
/// results do not depend on batch composition or thread count.
pub fn batch_embed(
    model: &GroveModel,
    z: &Matrix,
    modality: Modality,
    cfg: &LatentFitConfig,
) -> Result<Vec<ProbabilisticEmbedding>> {
    cfg.validate()?;
    if z.rows() == 0 {
        return Ok(Vec::new());
    }
    let predictor = PointPredictor::new(model.gp(modality))?;
    if z.cols() != predictor.gp().out_dims() {
        return Err(GroveError::ShapeMismatch(format!(
            "embeddings have {} dims, {modality} gp expects {}",
            z.cols(),
            predictor.gp().out_dims()
        )));
    }
    par::map_range(z.rows(), |i| {
        let row_cfg = LatentFitConfig {
            seed: row_seed(cfg.seed, i),
            ..*cfg
        };
        predictor.embed(z.row(i), modality, &row_cfg)
    })
    .into_iter()
    .collect()
}
