use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    loss_total, AdamState, GroveModel, LatentState, PairedEmbeddings, TrainConfig, VariationalInit, XInit,
};
use crate::error::{GroveError, Result};
use crate::kernels::KernelSpec;
use crate::numerics::{principal_scores, Matrix};
use crate::svgp::{SparseGp, VariationalCov};

/// Epoch means of the batch losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_emb: f64,
    pub loss_kl: f64,
}

fn moments(z: &Matrix) -> (f64, f64) {
    let n = z.as_slice().len() as f64;
    let mean = z.sum() / n;
    let var = z.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn init_gp(config: &TrainConfig, inducing: &Matrix, rows: &[usize], z: &Matrix) -> Result<SparseGp> {
    let (mean, var) = moments(z);
    let noise = (config.init_noise_ratio * var).max(1e-6);
    let kernel = KernelSpec::with_output_scale(config.kernel, config.init_lengthscale, config.output_scale)?;
    let var_mean = z.select_rows(rows);
    let var_cov = VariationalCov::scaled_identity(config.variational_mode, rows.len(), z.cols(), noise.sqrt());
    let mut gp = SparseGp::new(kernel, mean, noise, inducing.clone(), var_mean, var_cov)?;
    if config.variational_init == VariationalInit::Prior {
        gp.set_variational_to_prior()?;
    }
    Ok(gp)
}

/// Builds the untrained model. Latents come from [`XInit`] at scale
/// `x_init_scale`; both GPs start with inducing points at the same `M` latent rows (drawn
/// without replacement) and variational means equal to those rows' embeddings.
pub fn init_model(data: &PairedEmbeddings, config: &TrainConfig) -> Result<(GroveModel, ChaCha8Rng)> {
    config.validate()?;
    let n = data.len();
    if n < 2 {
        return Err(GroveError::EmptyDataset(format!("training needs at least 2 pairs, got {n}")));
    }
    let q = config.q_dim;
    for (name, z) in [("image", &data.image), ("text", &data.text)] {
        if q >= z.cols() {
            return Err(GroveError::InvalidConfig(format!(
                "q_dim {q} must be smaller than the {name} embedding dim {}",
                z.cols()
            )));
        }
        if !z.all_finite() {
            return Err(GroveError::NonFiniteValue(format!("{name} embeddings")));
        }
    }
    if config.lambda2 > 0.0 && data.image.cols() != data.text.cols() {
        return Err(GroveError::InvalidConfig(format!(
            "lambda2 > 0 needs equal embedding dims, got {} and {}",
            data.image.cols(),
            data.text.cols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = Matrix::from_fn(n, q, |_, _| {
        let s: f64 = StandardNormal.sample(&mut rng);
        s * config.x_init_scale
    });
    if config.x_init == XInit::Pca {
        let (di, dt) = (data.image.cols(), data.text.cols());
        let joint = Matrix::from_fn(n, di + dt, |i, j| {
            if j < di {
                data.image[(i, j)]
            } else {
                data.text[(i, j - di)]
            }
        });
        x = principal_scores(&joint, q, config.x_init_scale)?;
    }
    let m = config.m_inducing.min(n);
    if m < config.m_inducing {
        info!("m_inducing {} exceeds {n} pairs; using every latent point", config.m_inducing);
    }
    let rows = index::sample(&mut rng, n, m).into_vec();
    let inducing = x.select_rows(&rows);
    let gp_image = init_gp(config, &inducing, &rows, &data.image)?;
    let gp_text = init_gp(config, &inducing, &rows, &data.text)?;
    let model = GroveModel::new(LatentState { x }, gp_image, gp_text, config.clone())?;
    Ok((model, rng))
}

/// Stateful training loop: one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer<'a> {
    data: &'a PairedEmbeddings,
    model: GroveModel,
    params: Vec<f64>,
    adam: AdamState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a PairedEmbeddings, config: &TrainConfig) -> Result<Self> {
        let (model, rng) = init_model(data, config)?;
        Ok(Self::from_model(data, model, rng))
    }

    /// Continues from an existing model with fresh optimizer state.
    pub fn from_model(data: &'a PairedEmbeddings, model: GroveModel, rng: ChaCha8Rng) -> Self {
        let params = model.to_flat();
        let adam = AdamState::new(params.len());
        Trainer {
            data,
            order: (0..data.len()).collect(),
            model,
            params,
            adam,
            rng,
            epoch: 0,
        }
    }

    pub fn model(&self) -> &GroveModel {
        &self.model
    }

    pub fn into_model(self) -> GroveModel {
        self.model
    }

    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        let cfg = self.model.config.adam();
        let batch_size = self.model.config.batch_size;
        self.order.shuffle(&mut self.rng);
        let (mut total, mut emb, mut kl) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let order = std::mem::take(&mut self.order);
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let out = loss_total(&self.model, batch, self.data).map_err(|e| match e {
                GroveError::NonFiniteValue(_) | GroveError::NotPositiveDefinite { .. } => {
                    log::error!("epoch {} batch {b}: {e}", self.epoch);
                    GroveError::NonFiniteLoss {
                        epoch: self.epoch,
                        batch: b,
                    }
                }
                other => other,
            })?;
            let grad = out.grad.expect("loss_total returns gradients");
            if !out.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(GroveError::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                });
            }
            super::adam_step(&mut self.params, &grad, &mut self.adam, &cfg)?;
            self.model.set_flat(&self.params)?;
            total += out.total;
            emb += out.emb;
            kl += out.kl;
            batches += 1;
        }
        self.order = order;
        let k = batches as f64;
        let record = EpochLoss {
            epoch: self.epoch,
            loss_total: total / k,
            loss_emb: emb / k,
            loss_kl: kl / k,
        };
        debug!(
            "epoch {} total {:.6e} emb {:.6e} kl {:.6e}",
            record.epoch, record.loss_total, record.loss_emb, record.loss_kl
        );
        self.epoch += 1;
        Ok(record)
    }
}

/// Trains for `config.epochs` epochs of shuffled minibatches.
pub fn train(data: &PairedEmbeddings, config: &TrainConfig) -> Result<(GroveModel, Vec<EpochLoss>)> {
    let mut trainer = Trainer::new(data, config)?;
    let mut trace = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let rec = trainer.run_epoch()?;
        if e == 0 || (e + 1) % 10 == 0 || e + 1 == config.epochs {
            info!(
                "epoch {}/{}: loss_total {:.6e} (emb {:.6e}, kl {:.6e})",
                e + 1,
                config.epochs,
                rec.loss_total,
                rec.loss_emb,
                rec.loss_kl
            );
        }
        trace.push(rec);
    }
    Ok((trainer.into_model(), trace))
}
