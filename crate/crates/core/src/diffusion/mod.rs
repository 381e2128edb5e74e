//! Toy conditional latent diffusion: noising, loss, training and DDIM sampling.

mod denoiser;
mod latent;
mod schedule;

pub use denoiser::{positional_encoding, ConditionBundle, Denoiser, DenoiserCache, DenoiserConfig, NoisePredictor};
pub use latent::{decode_latent, encode_latent, DEFAULT_PATCH};
pub use schedule::{add_noise, add_noise_with_alpha_bar, make_schedule, predict_z0, NoiseSchedule};

use crate::dynmask::BinaryPoseMask;
use crate::error::{Error, Result};
use crate::numerics::{mse, mse_grad, randn, Adam, AdamConfig, Parameterized, RngState, Tensor};

pub const PROMPT_DROPOUT: f64 = 0.5;
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// One training example in latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub latent: Tensor,
    pub pose_mask: Option<BinaryPoseMask>,
    pub kb_features: Option<Tensor>,
}

impl TrainingItem {
    pub fn condition(&self) -> ConditionBundle {
        ConditionBundle {
            kb_features: self.kb_features.clone(),
            pose_mask: self.pose_mask.clone(),
        }
    }
}

/// Draws whether this sample's prompt is replaced by the null token.
pub fn prompt_dropout(rng: &mut RngState, probability: f64) -> bool {
    rng.bernoulli(probability)
}

/// Batch loss `mean ‖ε − ε̂(z_t, c, t)‖²` with uniformly drawn `t`, standard
/// normal `ε` and prompt dropout. Gradients are accumulated into `model`.
pub fn diffusion_loss(
    batch: &[TrainingItem],
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    rng: &mut RngState,
    dropout: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("diffusion batch is empty".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let t = rng.below(sched.steps());
        let eps = randn(item.latent.shape(), rng);
        let mut cond = item.condition();
        if prompt_dropout(rng, dropout) {
            cond = cond.without_prompt();
        }
        let z_t = add_noise(&item.latent, t, &eps, sched)?;
        let cache = model.forward_cached(&z_t, t, &cond)?;
        total += mse(cache.output(), &eps)?;
        let d = mse_grad(cache.output(), &eps)?.scale(scale);
        model.backward(&cache, &d)?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("diffusion loss is not finite".into()));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub prompt_dropout: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-5,
            batch_size: 8,
            prompt_dropout: PROMPT_DROPOUT,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Adam at a constant learning rate over shuffled minibatches.
pub fn train_diffusion(
    corpus: &[TrainingItem],
    model: &mut Denoiser,
    sched: &NoiseSchedule,
    config: &DiffusionConfig,
) -> Result<DiffusionReport> {
    if corpus.is_empty() {
        return Err(Error::Config("diffusion corpus is empty".into()));
    }
    let mut rng = RngState::new(config.seed).fork("diffusion-train");
    let mut opt = Adam::new(AdamConfig::adam(config.lr));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut report = DiffusionReport {
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    for _ in 0..config.epochs {
        crate::classifier::shuffle(&mut order, &mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<TrainingItem> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            model.zero_grad();
            sum += diffusion_loss(&batch, model, sched, &mut rng, config.prompt_dropout)?;
            opt.step(model.params_mut(), config.lr)?;
            batches += 1;
        }
        if !model.all_finite() {
            return Err(Error::Numeric("denoiser parameters diverged".into()));
        }
        report.epoch_losses.push(sum / batches as f64);
    }
    Ok(report)
}

/// `steps` evenly spaced timesteps in increasing order, starting at zero.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!("DDIM steps {steps} must be in [1, {total}]")));
    }
    Ok((0..steps).map(|i| i * total / steps).collect())
}

/// One deterministic (η = 0) DDIM update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Tensor> {
    let z0 = predict_z0(z_t, alpha_bar, eps_hat)?;
    add_noise_with_alpha_bar(&z0, alpha_bar_prev, eps_hat)
}

/// Classifier-free guided prediction; `guidance == 1` evaluates the conditional branch only.
pub fn guided_prediction<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor,
    t: usize,
    cond: &ConditionBundle,
    guidance: f64,
) -> Result<Tensor> {
    let cond_eps = model.predict(z, t, cond)?;
    if guidance == 1.0 || cond.kb_features.is_none() {
        return Ok(cond_eps);
    }
    let null_eps = model.predict(z, t, &cond.without_prompt())?;
    null_eps.zip_map(&cond_eps, "guidance", |u, c| u + guidance * (c - u))
}

/// Runs the DDIM trajectory from `z_start` and returns the final clean latent.
pub fn ddim_sample_from<P: NoisePredictor + ?Sized>(
    z_start: Tensor,
    cond: &ConditionBundle,
    model: &P,
    sched: &NoiseSchedule,
    steps: usize,
    guidance: f64,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let mut z = z_start;
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab = sched.alpha_bar(t)?;
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(ts[i - 1])? };
        let eps = guided_prediction(model, &z, t, cond, guidance)?;
        z = ddim_step(&z, &eps, ab, ab_prev)?;
        if !z.is_finite() {
            return Err(Error::Numeric(format!("DDIM latent became non-finite at t={t}")));
        }
    }
    Ok(z)
}

/// Samples a latent from Gaussian noise seeded by `seed`.
pub fn ddim_sample_latent<P: NoisePredictor + ?Sized>(
    cond: &ConditionBundle,
    model: &P,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    guidance: f64,
    latent_shape: &[usize],
) -> Result<Tensor> {
    let mut rng = RngState::new(seed).fork("ddim-noise");
    let z = randn(latent_shape, &mut rng);
    ddim_sample_from(z, cond, model, sched, steps, guidance)
}

/// Full sampler: noise → DDIM → decoded image clamped to `[0, 1]`.
pub fn ddim_sample(
    cond: &ConditionBundle,
    model: &Denoiser,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    guidance: f64,
) -> Result<Tensor> {
    let c = &model.config;
    let z = ddim_sample_latent(cond, model, sched, steps, seed, guidance, &[c.tokens(), c.latent_dim])?;
    let patch = (c.latent_dim as f64).sqrt() as usize;
    Ok(decode_latent(&z, patch, c.grid)?.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the clean latent and returns the exact noise for any `z_t`.
    struct Oracle {
        z0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict(&self, z_t: &Tensor, t: usize, _: &ConditionBundle) -> Result<Tensor> {
            let ab = self.sched.alpha_bars[t];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            z_t.zip_map(&self.z0, "oracle", |z, x| (z - a * x) / b)
        }
    }

    #[test]
    fn timesteps_are_even() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (0, 20, 980));
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn one_step_inversion_with_true_noise() {
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = RngState::new(8);
        let z0 = randn(&[4, 3], &mut rng);
        for t in [0, 10, 500, 999] {
            let eps = randn(&[4, 3], &mut rng);
            let zt = add_noise(&z0, t, &eps, &sched).unwrap();
            let back = ddim_step(&zt, &eps, sched.alpha_bars[t], 1.0).unwrap();
            assert!(back.max_abs_diff(&z0) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn full_trajectory_with_oracle_recovers_latent() {
        let sched = make_schedule(100, 1e-3, 0.05).unwrap();
        let mut rng = RngState::new(9);
        let z0 = randn(&[3, 2], &mut rng);
        let oracle = Oracle {
            z0: z0.clone(),
            sched: sched.clone(),
        };
        let out = ddim_sample_latent(&ConditionBundle::default(), &oracle, &sched, 100, 1, 1.0, &[3, 2]).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-6);
    }

    #[test]
    fn empty_batch_is_config_error() {
        let mut model = Denoiser::zeros(DenoiserConfig::default());
        let sched = make_schedule(10, 1e-3, 0.02).unwrap();
        let mut rng = RngState::new(0);
        assert!(matches!(
            diffusion_loss(&[], &mut model, &sched, &mut rng, 0.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_config_values() {
        let c = DiffusionConfig::default();
        assert_eq!((c.epochs, c.lr, c.prompt_dropout, c.timesteps), (10, 1e-5, 0.5, 1000));
        assert_eq!(DEFAULT_SAMPLE_STEPS, 50);
    }
}
