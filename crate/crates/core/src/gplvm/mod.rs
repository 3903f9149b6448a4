//! The two-modality latent variable model.
//!
//! Every training pair owns one latent point. An image GP and a text GP map
//! the shared latent space to the two embedding spaces. Training minimizes
//! `λ₁·L_emb + λ₂·L_KL`, where `L_emb` is the negated sum of both ELBOs and
//! `L_KL` the batch mean of the symmetric KL between the two GPs' predictive
//! marginals at each latent point.

mod adam;
mod config;
mod train;


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{TrainConfig, VariationalInit, XInit};
pub use train::{init_model, train, EpochLoss, Trainer};

use crate::error::{GroveError, Result};
use crate::numerics::Matrix;
use crate::svgp::{
    clamp_variance, elbo_accumulate, marginals, marginals_backward, GradAccum, Marginals,
    PriorCache, SparseGp, VARIANCE_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

impl FromStr for Modality {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(GroveError::InvalidConfig(format!(
                "modality: expected image or text, got {other:?}"
            ))),
        }
    }
}

/// Image and text embeddings aligned by row: row `i` of each is pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEmbeddings {
    pub image: Matrix,
    pub text: Matrix,
}

impl PairedEmbeddings {
    pub fn new(image: Matrix, text: Matrix) -> Result<Self> {
        if image.rows() != text.rows() {
            return Err(GroveError::ShapeMismatch(format!(
                "{} image rows vs {} text rows",
                image.rows(),
                text.rows()
            )));
        }
        Ok(PairedEmbeddings { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, m: Modality) -> &Matrix {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}

/// Latent points, one row per training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Matrix,
}

impl LatentState {
    pub fn n_pairs(&self) -> usize {
        self.x.rows()
    }

    pub fn q_dim(&self) -> usize {
        self.x.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroveModel {
    pub latent: LatentState,
    pub gp_image: SparseGp,
    pub gp_text: SparseGp,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rng_seed: u64,
    /// Configuration the model was built with.
    pub config: TrainConfig,
}

impl GroveModel {
    pub fn new(
        latent: LatentState,
        gp_image: SparseGp,
        gp_text: SparseGp,
        config: TrainConfig,
    ) -> Result<Self> {
        let model = GroveModel {
            latent,
            gp_image,
            gp_text,
            lambda1: config.lambda1,
            lambda2: config.lambda2,
            rng_seed: config.seed,
            config,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.latent.q_dim();
        if !self.latent.x.all_finite() {
            return Err(GroveError::NonFiniteValue("latent points".into()));
        }
        for (name, gp) in [("image", &self.gp_image), ("text", &self.gp_text)] {
            gp.validate()?;
            if gp.q_dim() != q {
                return Err(GroveError::ShapeMismatch(format!(
                    "{name} gp has latent dim {}, latent state has {q}",
                    gp.q_dim()
                )));
            }
            if q >= gp.out_dims() {
                return Err(GroveError::ShapeMismatch(format!(
                    "latent dim {q} must be smaller than the {name} embedding dim {}",
                    gp.out_dims()
                )));
            }
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(GroveError::InvalidConfig("trade-off weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn gp(&self, m: Modality) -> &SparseGp {
        match m {
            Modality::Image => &self.gp_image,
            Modality::Text => &self.gp_text,
        }
    }

    pub fn n_params(&self) -> usize {
        self.latent.x.rows() * self.latent.x.cols() + self.gp_image.n_params() + self.gp_text.n_params()
    }

    /// `[X…, image gp…, text gp…]` in unconstrained coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut p = self.latent.x.as_slice().to_vec();
        p.extend(self.gp_image.to_flat());
        p.extend(self.gp_text.to_flat());
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(GroveError::ShapeMismatch(format!(
                "model expects {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        let nx = self.latent.x.rows() * self.latent.x.cols();
        let ni = self.gp_image.n_params();
        self.latent.x.as_mut_slice().copy_from_slice(&p[..nx]);
        self.gp_image.set_flat(&p[nx..nx + ni])?;
        self.gp_text.set_flat(&p[nx + ni..])?;
        Ok(())
    }
}

/// Loss values for one batch, with the gradient of `total` in the layout of
/// [`GroveModel::to_flat`] when requested.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub emb: f64,
    pub kl: f64,
    pub grad: Option<Vec<f64>>,
}

fn check_batch(model: &GroveModel, batch: &[usize], data: Option<&PairedEmbeddings>) -> Result<()> {
    let n = model.latent.n_pairs();
    if batch.is_empty() {
        return Err(GroveError::EmptyDataset("batch is empty".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(GroveError::ShapeMismatch(format!(
            "batch index {bad} out of range for {n} latent points"
        )));
    }
    if let Some(data) = data {
        if data.len() != n {
            return Err(GroveError::ShapeMismatch(format!(
                "{} data pairs for {n} latent points",
                data.len()
            )));
        }
        if data.image.cols() != model.gp_image.out_dims() || data.text.cols() != model.gp_text.out_dims() {
            return Err(GroveError::ShapeMismatch("embedding dims do not match the gps".into()));
        }
    }
    Ok(())
}

/// Symmetric diagonal-Gaussian KL `½[KL(p‖q) + KL(q‖p)]` for one coordinate,
/// with derivatives `(∂/∂μp, ∂/∂vp, ∂/∂vq)`; `∂/∂μq = −∂/∂μp`.
#[inline]
fn sym_kl_1d(mp: f64, vp: f64, mq: f64, vq: f64) -> (f64, f64, f64, f64) {
    let dm = mp - mq;
    let dm2 = dm * dm;
    let value = 0.25 * (vp / vq + vq / vp + dm2 * (1.0 / vp + 1.0 / vq) - 2.0);
    let d_mp = 0.5 * dm * (1.0 / vp + 1.0 / vq);
    let d_vp = 0.25 * (1.0 / vq - (vq + dm2) / (vp * vp));
    let d_vq = 0.25 * (1.0 / vp - (vp + dm2) / (vq * vq));
    (value, d_mp, d_vp, d_vq)
}

/// Batch mean of the symmetric KL between the two GPs' marginals; when
/// `weight` is given, also returns upstream gradients `weight·∂/∂(mean, var)`
/// for image and text. Clamped variances receive no gradient.
fn alignment_kl(
    img: &Marginals,
    txt: &Marginals,
    weight: Option<f64>,
) -> Result<(f64, Option<[Matrix; 4]>)> {
    if img.mean.shape() != txt.mean.shape() {
        return Err(GroveError::ShapeMismatch(format!(
            "cross-modal KL needs equal embedding dims, got {} and {}",
            img.mean.cols(),
            txt.mean.cols()
        )));
    }
    let (b, d) = img.mean.shape();
    let mut total = 0.0;
    let mut grads = weight.map(|_| {
        [
            Matrix::zeros(b, d),
            Matrix::zeros(b, d),
            Matrix::zeros(b, d),
            Matrix::zeros(b, d),
        ]
    });
    let scale = weight.unwrap_or(0.0) / b as f64;
    for i in 0..b {
        for j in 0..d {
            let (vi_raw, vt_raw) = (img.var[(i, j)], txt.var[(i, j)]);
            let vi = clamp_variance(vi_raw);
            let vt = clamp_variance(vt_raw);
            let (value, d_mi, d_vi, d_vt) = sym_kl_1d(img.mean[(i, j)], vi, txt.mean[(i, j)], vt);
            total += value;
            if let Some([gmi, gvi, gmt, gvt]) = grads.as_mut() {
                gmi[(i, j)] = scale * d_mi;
                gmt[(i, j)] = -scale * d_mi;
                if vi_raw > VARIANCE_FLOOR {
                    gvi[(i, j)] = scale * d_vi;
                }
                if vt_raw > VARIANCE_FLOOR {
                    gvt[(i, j)] = scale * d_vt;
                }
            }
        }
    }
    Ok((total / b as f64, grads))
}

fn evaluate(
    model: &GroveModel,
    batch: &[usize],
    data: &PairedEmbeddings,
    want_grad: bool,
) -> Result<LossOutput> {
    check_batch(model, batch, Some(data))?;
    let n = model.latent.n_pairs();
    let x = model.latent.x.select_rows(batch);
    let z_img = data.image.select_rows(batch);
    let z_txt = data.text.select_rows(batch);
    let (gi, gt) = (&model.gp_image, &model.gp_text);
    let prior_i = PriorCache::new(gi)?;
    let prior_t = PriorCache::new(gt)?;
    let mut acc_i = GradAccum::new(gi);
    let mut acc_t = GradAccum::new(gt);
    let (l1, l2) = (model.lambda1, model.lambda2);

    let (elbo_i, mut gx) = elbo_accumulate(gi, &prior_i, &x, &z_img, n, -l1, &mut acc_i)?;
    let (elbo_t, gx_t) = elbo_accumulate(gt, &prior_t, &x, &z_txt, n, -l1, &mut acc_t)?;
    gx.add_assign(&gx_t);
    let emb = -(elbo_i + elbo_t);

    let kl = if gi.out_dims() == gt.out_dims() {
        let mi = marginals(gi, &prior_i, &x)?;
        let mt = marginals(gt, &prior_t, &x)?;
        let weight = (want_grad && l2 != 0.0).then_some(l2);
        let (kl, grads) = alignment_kl(&mi, &mt, weight)?;
        if let Some([gmi, gvi, gmt, gvt]) = grads {
            gx.add_assign(&marginals_backward(gi, &prior_i, &x, &mi, &gmi, &gvi, &mut acc_i)?);
            gx.add_assign(&marginals_backward(gt, &prior_t, &x, &mt, &gmt, &gvt, &mut acc_t)?);
        }
        kl
    } else if l2 == 0.0 {
        0.0
    } else {
        return Err(GroveError::ShapeMismatch(format!(
            "lambda2 > 0 needs equal embedding dims, got {} and {}",
            gi.out_dims(),
            gt.out_dims()
        )));
    };

    let total = l1 * emb + l2 * kl;
    let grad = if want_grad {
        let q = x.cols();
        let mut g = vec![0.0; model.n_params()];
        for (row, &i) in batch.iter().enumerate() {
            for t in 0..q {
                g[i * q + t] += gx[(row, t)];
            }
        }
        let nx = n * q;
        let g_i = acc_i.finish(gi)?.to_flat();
        let g_t = acc_t.finish(gt)?.to_flat();
        g[nx..nx + g_i.len()].copy_from_slice(&g_i);
        g[nx + g_i.len()..].copy_from_slice(&g_t);
        Some(g)
    } else {
        None
    };
    Ok(LossOutput {
        total,
        emb,
        kl,
        grad,
    })
}

/// `−(ELBO_image + ELBO_text)` on a batch, expectation terms scaled by `N/B`.
pub fn loss_emb(model: &GroveModel, batch: &[usize], data: &PairedEmbeddings) -> Result<f64> {
    Ok(evaluate(model, batch, data, false)?.emb)
}

/// Batch mean of `½[KL(image‖text) + KL(text‖image)]` between the two GPs'
/// diagonal predictive marginals at the batch's latent points.
pub fn loss_kl(model: &GroveModel, batch: &[usize]) -> Result<f64> {
    check_batch(model, batch, None)?;
    let x = model.latent.x.select_rows(batch);
    let mi = marginals(&model.gp_image, &PriorCache::new(&model.gp_image)?, &x)?;
    let mt = marginals(&model.gp_text, &PriorCache::new(&model.gp_text)?, &x)?;
    Ok(alignment_kl(&mi, &mt, None)?.0)
}

/// `λ₁·loss_emb + λ₂·loss_kl` with gradients for all parameters.
pub fn loss_total(model: &GroveModel, batch: &[usize], data: &PairedEmbeddings) -> Result<LossOutput> {
    evaluate(model, batch, data, true)
}

/// As [`loss_total`] without the backward pass.
pub fn loss_total_value(model: &GroveModel, batch: &[usize], data: &PairedEmbeddings) -> Result<LossOutput> {
    evaluate(model, batch, data, false)
}
