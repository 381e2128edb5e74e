use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Linear beta schedule with cumulative products `ᾱ_t = Π_{s≤t}(1−β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0,1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Input(format!("timestep {t} outside [0, {})", self.steps())))
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let span = beta_end - beta_start;
    let betas = (0..steps)
        .map(|t| beta_start + span * t as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `z_t = √ᾱ z₀ + √(1−ᾱ) ε` for an explicit `ᾱ`.
pub fn add_noise_with_alpha_bar(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, "add_noise", |z, e| a * z + b * e)
}

pub fn add_noise(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    add_noise_with_alpha_bar(z0, sched.alpha_bar(t)?, eps)
}

/// Clean-latent estimate `ẑ₀ = (z_t − √(1−ᾱ) ε̂)/√ᾱ`.
pub fn predict_z0(z_t: &Tensor, alpha_bar: f64, eps_hat: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.zip_map(eps_hat, "predict_z0", |z, e| (z - b * e) / a)
}
