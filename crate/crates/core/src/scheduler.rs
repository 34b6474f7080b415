//! Noise schedule and the deterministic DDIM refinement step.
//!
//! A step estimates the clean latent from the current latent and the
//! predicted noise, then re-noises it to the next (lower) noise level:
//!
//! ```text
//! x0   = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)
//! x_t' = sqrt(ab_prev) * x0 + sqrt(1 - ab_prev) * eps
//! ```
//!
//! `ab_prev` is the cumulative alpha of the next inference timestep, or 1
//! after the last one. Arithmetic is done in `f64` and rounded to `f32` once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.channels, self.height, self.width]
    }
}

impl Default for LatentShape {
    /// Stable Diffusion v1 latent for a 512x512 image.
    fn default() -> Self {
        Self::new(4, 64, 64)
    }
}

/// The image representation being refined, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    data: Vec<f32>,
    timestep_index: usize,
}

impl LatentTensor {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            timestep_index: 0,
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.dims(),
                found: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            timestep_index: 0,
        })
    }

    pub fn with_timestep_index(mut self, index: usize) -> Self {
        self.timestep_index = index;
        self
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Position in the inference loop; 0 is the initial noise.
    pub fn timestep_index(&self) -> usize {
        self.timestep_index
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance between two latents of the same shape.
    pub fn distance(&self, other: &LatentTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    pub(crate) fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.dims(),
                found: other.shape.dims(),
            });
        }
        Ok(())
    }
}

/// Standard-normal latent from [`SeededRng`]; identical seeds give
/// bit-identical tensors on every platform.
pub fn initial_noise(seed: u64, shape: LatentShape) -> LatentTensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..shape.len()).map(|_| rng.normal() as f32).collect();
    LatentTensor {
        shape,
        data,
        timestep_index: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    /// Betas evenly spaced between `beta_start` and `beta_end`.
    Linear,
    /// `sqrt(beta)` evenly spaced; the Stable Diffusion schedule.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            inference_steps: 50,
            beta_start: 0.00085,
            beta_end: 0.012,
            spacing: BetaSpacing::ScaledLinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
    steps_offset: usize,
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

impl NoiseSchedule {
    pub fn build(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            train_steps,
            inference_steps,
            beta_start,
            beta_end,
            spacing,
        } = config;
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if inference_steps < 1 || inference_steps > train_steps {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= inference_steps ({inference_steps}) <= train_steps ({train_steps})"
            )));
        }
        let betas = match spacing {
            BetaSpacing::Linear => linspace(beta_start, beta_end, train_steps),
            BetaSpacing::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), train_steps)
                .into_iter()
                .map(|s| s * s)
                .collect(),
        };
        Self::from_betas(config, betas)
    }

    fn from_betas(config: ScheduleConfig, betas: Vec<f64>) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();

        let n = config.inference_steps;
        let ratio = config.train_steps as f64 / n as f64;
        let raw: Vec<usize> = (0..n)
            .map(|i| (ratio * (n - 1 - i) as f64).round_ties_even() as usize)
            .collect();
        // Offset by one as Stable Diffusion does, unless that would step past
        // the last training step.
        let steps_offset = usize::from(raw[0] < config.train_steps - 1);
        let timesteps = raw.into_iter().map(|t| t + steps_offset).collect();

        Ok(Self {
            config,
            betas,
            alphas,
            alpha_bars,
            timesteps,
            steps_offset,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Descending train-step indices visited by the inference loop.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn steps_offset(&self) -> usize {
        self.steps_offset
    }

    pub fn inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `(alpha_bar_t, alpha_bar_prev)` for inference step `i`.
    pub fn step_coefficients(&self, i: usize) -> Result<(f64, f64)> {
        let t = *self.timesteps.get(i).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "inference step {i} out of range 0..{}",
                self.timesteps.len()
            ))
        })?;
        let prev = self
            .timesteps
            .get(i + 1)
            .map_or(1.0, |&tp| self.alpha_bars[tp]);
        Ok((self.alpha_bars[t], prev))
    }

    /// One DDIM (eta = 0) update at inference step `i`.
    pub fn step(&self, latent: &LatentTensor, predicted_noise: &LatentTensor, i: usize) -> Result<LatentTensor> {
        latent.check_same_shape(predicted_noise)?;
        if !latent.is_finite() || !predicted_noise.is_finite() {
            return Err(Error::NonFinite(format!("input to scheduler step {i}")));
        }
        let (ab_t, ab_prev) = self.step_coefficients(i)?;
        let sqrt_ab = ab_t.sqrt();
        let sqrt_one_minus_ab = (1.0 - ab_t).sqrt();
        let sqrt_ab_prev = ab_prev.sqrt();
        let sqrt_one_minus_ab_prev = (1.0 - ab_prev).sqrt();
        let data = latent
            .data
            .iter()
            .zip(&predicted_noise.data)
            .map(|(&x, &eps)| {
                let (x, eps) = (f64::from(x), f64::from(eps));
                let x0 = (x - sqrt_one_minus_ab * eps) / sqrt_ab;
                (sqrt_ab_prev * x0 + sqrt_one_minus_ab_prev * eps) as f32
            })
            .collect();
        Ok(LatentTensor {
            shape: latent.shape,
            data,
            timestep_index: latent.timestep_index + 1,
        })
    }
}
