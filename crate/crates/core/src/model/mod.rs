//! The diffusion autoencoder: semantic encoder, conditional denoiser, joint
//! training, and the deterministic encode / decode paths.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, DaeCheckpoint, TrainingProgress, CHECKPOINT_MAGIC};
pub use net::Dae;
pub use train::{train_dae, write_loss_curve, TrainOptions, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_invert_step, ddim_step, NoiseSchedule, ScheduleParams, StepSchedule};
use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Training objective on the noise prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    L1,
}

impl LossKind {
    /// Mean loss over elements and its gradient w.r.t. `pred`.
    pub(crate) fn value_and_grad<F: Scalar>(self, pred: &[F], target: &[F], n: F) -> (f64, Vec<F>) {
        let mut total = 0.0;
        let grad = pred
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = p - t;
                let dv = d.to_f64().unwrap_or(f64::NAN);
                match self {
                    LossKind::Mse => {
                        total += dv * dv;
                        (d + d) / n
                    }
                    LossKind::L1 => {
                        total += dv.abs();
                        d.signum() / n
                    }
                }
            })
            .collect();
        (total / pred.len() as f64, grad)
    }
}

/// Architecture, diffusion and optimization settings of a diffusion
/// autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaeConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    pub base_width: usize,
    /// U-Net width multipliers, one per resolution.
    pub channel_mult: Vec<usize>,
    pub encoder_mult: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub time_embed_dim: usize,
    pub max_groups: usize,
    pub zero_init_residual: bool,
    pub schedule: ScheduleParams,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub total_samples: usize,
    pub seed: u64,
}

impl Default for DaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DaeConfig {
    /// CPU-sized preset: 32x32 images, 64-d latent.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            latent_dim: 64,
            base_width: 16,
            channel_mult: vec![1, 2],
            encoder_mult: vec![1, 2, 2, 4],
            encoder_strides: vec![1, 2, 2, 2],
            time_embed_dim: 64,
            max_groups: 8,
            zero_init_residual: true,
            schedule: ScheduleParams::default(),
            loss: LossKind::Mse,
            learning_rate: 1e-3,
            grad_clip: Some(1.0),
            batch_size: 64,
            total_samples: 100_000,
            seed: 0,
        }
    }

    /// Full-size settings: 96x96 images, 512-d latent, 12M samples.
    pub fn paper() -> Self {
        Self {
            image_size: 96,
            latent_dim: 512,
            base_width: 64,
            channel_mult: vec![1, 2, 2],
            encoder_mult: vec![1, 2, 4, 4, 8],
            encoder_strides: vec![1, 2, 2, 2, 2],
            time_embed_dim: 256,
            max_groups: 32,
            learning_rate: 1e-4,
            total_samples: 12_000_000,
            ..Self::desk()
        }
    }

    /// Smallest useful instance, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            latent_dim: 4,
            base_width: 2,
            channel_mult: vec![1, 2],
            encoder_mult: vec![1, 2],
            encoder_strides: vec![1, 2],
            time_embed_dim: 4,
            max_groups: 2,
            batch_size: 4,
            total_samples: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("latent_dim", self.latent_dim),
            ("base_width", self.base_width),
            ("time_embed_dim", self.time_embed_dim),
            ("max_groups", self.max_groups),
            ("batch_size", self.batch_size),
            ("total_samples", self.total_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::InvalidConfig("channel_mult must be non-empty and positive".into()));
        }
        if self.encoder_mult.is_empty()
            || self.encoder_mult.contains(&0)
            || self.encoder_mult.len() != self.encoder_strides.len()
            || self.encoder_strides.iter().any(|&s| s == 0 || s > 2)
        {
            return Err(Error::InvalidConfig(
                "encoder_mult and encoder_strides must be non-empty, positive and of equal length (stride 1 or 2)".into(),
            ));
        }
        let factor = 1usize << (self.channel_mult.len() - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be divisible by {factor} for {} U-Net levels",
                self.image_size,
                self.channel_mult.len()
            )));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("time_embed_dim must be even".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        NoiseSchedule::linear(self.schedule)?;
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }
}

/// Builds a freshly initialized model; identical seeds give identical
/// parameters.
pub fn build_dae(config: DaeConfig, seed: u64) -> Result<Dae<f32>> {
    config.validate()?;
    Ok(Dae::init(config, seed))
}

/// Semantic latent code `z_sem`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticLatent(pub Vec<f64>);

impl SemanticLatent {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn to_model(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

/// Image-shaped noise latent `x_T` obtained by DDIM inversion, in model
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticLatent {
    pub size: usize,
    pub data: Vec<f32>,
}

/// [0, 1] pixels to model space [-1, 1].
pub fn to_model_space(pixels: &[f32]) -> Vec<f32> {
    pixels.iter().map(|&p| 2.0 * p - 1.0).collect()
}

/// Model space to clamped [0, 1] pixels.
pub fn to_pixel_space(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
}

impl Dae<f32> {
    fn check_image(&self, len: usize) -> Result<()> {
        let want = self.config.pixels();
        if len != want {
            return Err(Error::shape(
                format!("{0}x{0} image ({want} pixels)", self.config.image_size),
                format!("{len} pixels"),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, z: &SemanticLatent) -> Result<()> {
        if z.dim() != self.config.latent_dim {
            return Err(Error::shape(
                format!("latent of length {}", self.config.latent_dim),
                format!("length {}", z.dim()),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.config.schedule).expect("validated schedule")
    }

    /// Semantic latent of an image with pixels in [0, 1].
    pub fn encode_semantic(&self, pixels: &[f32]) -> Result<SemanticLatent> {
        self.check_image(pixels.len())?;
        let z = self.encode_raw(&to_model_space(pixels));
        Ok(SemanticLatent(z.into_iter().map(f64::from).collect()))
    }

    /// Deterministic DDIM inversion from the clean image up to `T`.
    pub fn encode_stochastic(
        &self,
        pixels: &[f32],
        z: &SemanticLatent,
        steps: &StepSchedule,
    ) -> Result<StochasticLatent> {
        self.check_image(pixels.len())?;
        self.check_latent(z)?;
        let schedule = self.schedule();
        let zm = z.to_model();
        let mut x = to_model_space(pixels);
        for (t_prev, t) in steps.pairs() {
            let eps = self.eps_raw(&x, t_prev, &zm);
            x = ddim_invert_step(&x, &eps, t_prev, t, &schedule)?;
        }
        Ok(StochasticLatent {
            size: self.config.image_size,
            data: x,
        })
    }

    /// Deterministic DDIM generation from `x_T` conditioned on `z`; returns
    /// [0, 1] pixels.
    pub fn decode(&self, x_t: &StochasticLatent, z: &SemanticLatent, steps: &StepSchedule) -> Result<Vec<f32>> {
        self.check_image(x_t.data.len())?;
        self.check_latent(z)?;
        let schedule = self.schedule();
        let zm = z.to_model();
        let mut x = x_t.data.clone();
        for (t_prev, t) in steps.pairs().rev() {
            let eps = self.eps_raw(&x, t, &zm);
            x = ddim_step(&x, &eps, t, t_prev, &schedule)?;
        }
        Ok(to_pixel_space(&x))
    }

    /// Encode both latents and decode them again.
    pub fn reconstruct(&self, pixels: &[f32], steps: &StepSchedule) -> Result<Vec<f32>> {
        let z = self.encode_semantic(pixels)?;
        let x_t = self.encode_stochastic(pixels, &z, steps)?;
        self.decode(&x_t, &z, steps)
    }

    /// Noise prediction for a model-space input; exposed for diagnostics.
    pub fn predict_noise(&self, x_t: &[f32], t: usize, z: &SemanticLatent) -> Result<Vec<f32>> {
        self.check_image(x_t.len())?;
        self.check_latent(z)?;
        Ok(self.eps_raw(x_t, t, &z.to_model()))
    }
}
