//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! epochs = 200
//! kernel = rbf
//! lambda2 = 400
//! ```
//!
//! Keys are the field names of [`TrainConfig`]; omitted keys keep their
//! defaults.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::error::{GroveError, Result};
use crate::inference::LatentObjective;
use crate::kernels::KernelFamily;
use crate::svgp::VariationalMode;

/// How the latent points are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XInit {
    /// Independent draws from `N(0, x_init_scale²)`.
    #[default]
    Random,
    /// Leading principal components of the concatenated `[image | text]`
    /// embeddings, each rescaled to standard deviation `x_init_scale`.
    Pca,
}

impl fmt::Display for XInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            XInit::Random => "random",
            XInit::Pca => "pca",
        })
    }
}

impl FromStr for XInit {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(XInit::Random),
            "pca" => Ok(XInit::Pca),
            other => Err(GroveError::InvalidConfig(format!(
                "x_init: unknown value {other:?} (expected random or pca)"
            ))),
        }
    }
}

/// How `q(u)` is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariationalInit {
    /// Means at the embeddings of the rows chosen as inducing points,
    /// covariance a small multiple of the identity.
    #[default]
    Data,
    /// `q(u)` equal to the GP prior at the inducing points.
    Prior,
}

impl fmt::Display for VariationalInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariationalInit::Data => "data",
            VariationalInit::Prior => "prior",
        })
    }
}

impl FromStr for VariationalInit {
    type Err = GroveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(VariationalInit::Data),
            "prior" => Ok(VariationalInit::Prior),
            other => Err(GroveError::InvalidConfig(format!(
                "variational_init: unknown value {other:?} (expected data or prior)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub q_dim: usize,
    pub m_inducing: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kernel: KernelFamily,
    pub variational_mode: VariationalMode,
    pub seed: u64,
    /// Initial kernel lengthscale for both GPs.
    pub init_lengthscale: f64,
    /// Initial noise variance as a fraction of each modality's embedding variance.
    pub init_noise_ratio: f64,
    /// Fixed kernel output scale.
    pub output_scale: f64,
    /// Standard deviation of the initial latent points.
    pub x_init_scale: f64,
    #[serde(default)]
    pub x_init: XInit,
    #[serde(default)]
    pub variational_init: VariationalInit,
    /// Latent-fit step size used when embedding new inputs with this model.
    #[serde(default = "default_fit_learning_rate")]
    pub fit_learning_rate: f64,
    /// Standard deviation of the latent-fit restart points.
    #[serde(default = "default_fit_init_scale")]
    pub fit_init_scale: f64,
    #[serde(default)]
    pub fit_objective: LatentObjective,
}

fn default_fit_learning_rate() -> f64 {
    1e-2
}

fn default_fit_init_scale() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            q_dim: 5,
            m_inducing: 250,
            lambda1: 0.01,
            lambda2: 400.0,
            kernel: KernelFamily::Rbf,
            variational_mode: VariationalMode::Full,
            seed: 0,
            init_lengthscale: 1.0,
            init_noise_ratio: 0.1,
            output_scale: 1.0,
            x_init_scale: 0.1,
            x_init: XInit::Random,
            variational_init: VariationalInit::Data,
            fit_learning_rate: default_fit_learning_rate(),
            fit_init_scale: default_fit_init_scale(),
            fit_objective: LatentObjective::PredictiveDensity,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GroveError::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "q_dim" => self.q_dim = parse(key, value)?,
            "m_inducing" => self.m_inducing = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "kernel" => self.kernel = value.parse()?,
            "variational_mode" => self.variational_mode = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "init_lengthscale" => self.init_lengthscale = parse(key, value)?,
            "init_noise_ratio" => self.init_noise_ratio = parse(key, value)?,
            "output_scale" => self.output_scale = parse(key, value)?,
            "x_init_scale" => self.x_init_scale = parse(key, value)?,
            "x_init" => self.x_init = value.parse()?,
            "variational_init" => self.variational_init = value.parse()?,
            "fit_learning_rate" => self.fit_learning_rate = parse(key, value)?,
            "fit_init_scale" => self.fit_init_scale = parse(key, value)?,
            "fit_objective" => self.fit_objective = value.parse()?,
            other => {
                return Err(GroveError::InvalidConfig(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GroveError::InvalidConfig(format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GroveError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {:e}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "epsilon = {:e}", self.epsilon);
        let _ = writeln!(s, "q_dim = {}", self.q_dim);
        let _ = writeln!(s, "m_inducing = {}", self.m_inducing);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "kernel = {}", self.kernel);
        let _ = writeln!(s, "variational_mode = {}", self.variational_mode);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "init_lengthscale = {}", self.init_lengthscale);
        let _ = writeln!(s, "init_noise_ratio = {}", self.init_noise_ratio);
        let _ = writeln!(s, "output_scale = {}", self.output_scale);
        let _ = writeln!(s, "x_init_scale = {}", self.x_init_scale);
        let _ = writeln!(s, "x_init = {}", self.x_init);
        let _ = writeln!(s, "variational_init = {}", self.variational_init);
        let _ = writeln!(s, "fit_learning_rate = {}", self.fit_learning_rate);
        let _ = writeln!(s, "fit_init_scale = {}", self.fit_init_scale);
        let _ = writeln!(s, "fit_objective = {}", self.fit_objective);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GroveError::InvalidConfig(format!("{key} must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(GroveError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.q_dim == 0 {
            return Err(GroveError::InvalidConfig("q_dim must be at least 1".into()));
        }
        if self.m_inducing == 0 {
            return Err(GroveError::InvalidConfig("m_inducing must be at least 1".into()));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("epsilon", self.epsilon)?;
        positive("init_lengthscale", self.init_lengthscale)?;
        positive("init_noise_ratio", self.init_noise_ratio)?;
        positive("output_scale", self.output_scale)?;
        positive("x_init_scale", self.x_init_scale)?;
        positive("fit_learning_rate", self.fit_learning_rate)?;
        positive("fit_init_scale", self.fit_init_scale)?;
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GroveError::InvalidConfig(format!("{key} must lie in [0, 1), got {b}")));
            }
        }
        for (key, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(GroveError::InvalidConfig(format!("{key} must be nonnegative, got {l}")));
            }
        }
        Ok(())
    }
}
