//! Synthetic paired embeddings for tests, benchmarks and sanity runs.
//!
//! Ground-truth latents `x ∈ R^Q` are pushed through a smooth random map
//! (random Fourier features) into `R^D` for the image side. The text side
//! applies the same map plus a second smooth distortion, so matching pairs
//! sit close together but not on top of each other. Observation noise is
//! heteroscedastic: its scale grows along the first latent axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gplvm::PairedEmbeddings;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub d: usize,
    pub q_true: usize,
    pub features: usize,
    /// Scale of the text-side distortion relative to the shared map.
    pub modality_gap: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pairs: 200,
            d: 8,
            q_true: 2,
            features: 24,
            modality_gap: 0.3,
            noise_min: 0.02,
            noise_max: 0.25,
            seed: 0,
        }
    }
}

/// Random Fourier feature map `x ↦ W·cos(Ωx + b)·√(2/K)`.
#[derive(Debug, Clone)]
pub struct SmoothMap {
    omega: Matrix,
    phase: Vec<f64>,
    weights: Matrix,
}

impl SmoothMap {
    pub fn random(rng: &mut ChaCha8Rng, q: usize, d: usize, features: usize, freq: f64) -> Self {
        let omega = Matrix::from_fn(features, q, |_, _| {
            let s: f64 = StandardNormal.sample(rng);
            s * freq
        });
        let phase = (0..features)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let weights = Matrix::from_fn(d, features, |_, _| StandardNormal.sample(rng));
        SmoothMap { omega, phase, weights }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let k = self.phase.len();
        let norm = (2.0 / k as f64).sqrt();
        let feats: Vec<f64> = (0..k)
            .map(|f| {
                let arg: f64 = self.omega.row(f).iter().zip(x).map(|(w, v)| w * v).sum();
                norm * (arg + self.phase[f]).cos()
            })
            .collect();
        (0..self.weights.rows())
            .map(|r| self.weights.row(r).iter().zip(&feats).map(|(w, f)| w * f).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub latent: Matrix,
    pub pairs: PairedEmbeddings,
    /// Per-pair observation noise standard deviation.
    pub noise_std: Vec<f64>,
}

/// Generator holding the ground-truth maps so fresh samples (e.g. a test split)
/// come from the same distribution.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub config: SyntheticConfig,
    image_map: SmoothMap,
    gap_map: SmoothMap,
}

impl SyntheticGenerator {
    pub fn new(config: SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let image_map = SmoothMap::random(&mut rng, config.q_true, config.d, config.features, 0.8);
        let gap_map = SmoothMap::random(&mut rng, config.q_true, config.d, config.features, 0.8);
        SyntheticGenerator {
            config,
            image_map,
            gap_map,
        }
    }

    fn noise_std(&self, x: &[f64]) -> f64 {
        let c = &self.config;
        let s = 1.0 / (1.0 + (-1.5 * x[0]).exp());
        c.noise_min + (c.noise_max - c.noise_min) * s
    }

    /// Noise-free image and text embeddings at latent `x`.
    pub fn clean(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let img = self.image_map.apply(x);
        let gap = self.gap_map.apply(x);
        let txt = img
            .iter()
            .zip(&gap)
            .map(|(a, g)| a + self.config.modality_gap * g)
            .collect();
        (img, txt)
    }

    /// Draws `n` pairs using the given sample seed.
    pub fn sample(&self, n: usize, seed: u64) -> SyntheticData {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = Matrix::from_fn(n, c.q_true, |_, _| StandardNormal.sample(&mut rng));
        let mut image = Matrix::zeros(n, c.d);
        let mut text = Matrix::zeros(n, c.d);
        let mut noise_std = Vec::with_capacity(n);
        for i in 0..n {
            let x = latent.row(i);
            let s = self.noise_std(x);
            let (img, txt) = self.clean(x);
            for j in 0..c.d {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                image[(i, j)] = img[j] + s * e1;
                text[(i, j)] = txt[j] + s * e2;
            }
            noise_std.push(s);
        }
        SyntheticData {
            latent,
            pairs: PairedEmbeddings { image, text },
            noise_std,
        }
    }
}

/// Convenience: generator plus one sample of `config.n_pairs` pairs.
pub fn generate(config: &SyntheticConfig) -> SyntheticData {
    let g = SyntheticGenerator::new(config.clone());
    g.sample(config.n_pairs, config.seed.wrapping_add(1))
}

/// Masks each embedding entry independently with probability `level`
/// (masked entries are set to zero).
pub fn mask(z: &Matrix, level: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = z.clone();
    for v in out.as_mut_slice() {
        if rng.random::<f64>() < level {
            *v = 0.0;
        }
    }
    out
}

/// Adds independent `N(0, std²)` noise to every embedding entry.
pub fn perturb(z: &Matrix, std: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = z.clone();
    for v in out.as_mut_slice() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += std * e;
    }
    out
}
