//! Guided refinement loop.
//!
//! Each inference step asks the noise predictor twice, once with the
//! prompt's representation and once with the empty prompt's, blends the two
//! with classifier-free guidance `u + s * (c - u)` and hands the result to
//! the scheduler. Every intermediate latent is kept.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dxt::DxtTensor;
use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::scheduler::{initial_noise, BetaSpacing, LatentShape, LatentTensor, NoiseSchedule};
use crate::text_encoding::{Conditioner, TextRepresentation};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.0;

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`, evaluated
/// in f64 per element.
pub fn guide(uncond: &LatentTensor, cond: &LatentTensor, scale: f64) -> Result<LatentTensor> {
    uncond.check_same_shape(cond)?;
    if !scale.is_finite() {
        return Err(Error::NonFinite(format!("guidance scale {scale}")));
    }
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| {
            let u = f64::from(u);
            (u + scale * (f64::from(c) - u)) as f32
        })
        .collect();
    LatentTensor::from_vec(uncond.shape(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    scale: f64,
    unconditional: TextRepresentation,
}

impl GuidanceConfig {
    pub fn new(scale: f64, unconditional: TextRepresentation) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "guidance scale must be finite and non-negative, got {scale}"
            )));
        }
        Ok(Self { scale, unconditional })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn unconditional(&self) -> &TextRepresentation {
        &self.unconditional
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cond,
    Uncond,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Cond => "cond",
            Branch::Uncond => "uncond",
        })
    }
}

/// Where in the loop a prediction is requested.
#[derive(Debug, Clone, Copy)]
pub struct PredictionContext<'a> {
    pub prompt_key: &'a str,
    /// Inference step index.
    pub step: usize,
    /// Train-step timestep at this inference step.
    pub timestep: usize,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorInfo {
    Synthetic {
        latent_coeff: f64,
        text_coeff: f64,
    },
    Ingested,
}

pub trait NoisePredictor: Send + Sync {
    fn predict(
        &self,
        ctx: &PredictionContext<'_>,
        latent: &LatentTensor,
        text: &TextRepresentation,
    ) -> Result<LatentTensor>;

    fn info(&self) -> PredictorInfo;
}

pub fn predict_noise(
    predictor: &dyn NoisePredictor,
    ctx: &PredictionContext<'_>,
    latent: &LatentTensor,
    text: &TextRepresentation,
) -> Result<LatentTensor> {
    predictor.predict(ctx, latent, text)
}

const PATTERN_COUNT: usize = 8;
const SIGN_SALT: u64 = 0xd1b5_4a32_d192_ed03;

/// Closed-form stand-in for the UNet:
///
/// ```text
/// eps[c,y,x] = a * latent[c,y,x] + b * g(t) * m[c,y,x]
/// g(t)       = 1 - t / train_steps
/// m[c,y,x]   = L^-1/2 * sum_i z[i,c] * P_(i mod 8)(y,x)
/// z[i,c]     = D^-1/2 * sum_j text[i,j] * sign(c,j)
/// P_k(y,x)   = sqrt(2) * cos(2pi((k mod 3 + 1) y / H + (k div 3 + 1) x / W) + k)
/// ```
///
/// `sign(c,j)` is +1 when `mix64(SIGN_SALT ^ (c << 32 | j))` is even, else
/// -1. Defaults: `a = 1`, `b = 0.5`.
pub struct SyntheticPredictor {
    shape: LatentShape,
    embed_dim: usize,
    train_steps: usize,
    latent_coeff: f64,
    text_coeff: f64,
    signs: Vec<f64>,
    patterns: Vec<f64>,
}

impl SyntheticPredictor {
    pub const DEFAULT_LATENT_COEFF: f64 = 1.0;
    pub const DEFAULT_TEXT_COEFF: f64 = 0.5;

    pub fn new(shape: LatentShape, embed_dim: usize, train_steps: usize) -> Self {
        Self::with_coefficients(
            shape,
            embed_dim,
            train_steps,
            Self::DEFAULT_LATENT_COEFF,
            Self::DEFAULT_TEXT_COEFF,
        )
    }

    pub fn with_coefficients(
        shape: LatentShape,
        embed_dim: usize,
        train_steps: usize,
        latent_coeff: f64,
        text_coeff: f64,
    ) -> Self {
        let signs = (0..shape.channels)
            .flat_map(|c| {
                (0..embed_dim).map(move |j| {
                    if mix64(SIGN_SALT ^ ((c as u64) << 32 | j as u64)) & 1 == 0 {
                        1.0
                    } else {
                        -1.0
                    }
                })
            })
            .collect();
        let (h, w) = (shape.height as f64, shape.width as f64);
        let mut patterns = Vec::with_capacity(PATTERN_COUNT * shape.height * shape.width);
        for k in 0..PATTERN_COUNT {
            let fy = (k % 3 + 1) as f64;
            let fx = (k / 3 + 1) as f64;
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let phase = 2.0 * std::f64::consts::PI * (fy * y as f64 / h + fx * x as f64 / w) + k as f64;
                    patterns.push(std::f64::consts::SQRT_2 * libm::cos(phase));
                }
            }
        }
        Self {
            shape,
            embed_dim,
            train_steps,
            latent_coeff,
            text_coeff,
            signs,
            patterns,
        }
    }

    /// The text term `m` reshaped to the latent layout.
    pub fn text_map(&self, text: &TextRepresentation) -> Result<Vec<f64>> {
        if text.embed_dim() != self.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![text.rows(), self.embed_dim],
                found: vec![text.rows(), text.embed_dim()],
            });
        }
        let channels = self.shape.channels;
        let plane = self.shape.height * self.shape.width;
        let dim_scale = 1.0 / (self.embed_dim as f64).sqrt();
        let mut binned = vec![0.0f64; PATTERN_COUNT * channels];
        for i in 0..text.rows() {
            let row = text.row(i);
            for c in 0..channels {
                let signs = &self.signs[c * self.embed_dim..(c + 1) * self.embed_dim];
                let z: f64 = row.iter().zip(signs).map(|(&v, &s)| f64::from(v) * s).sum();
                binned[(i % PATTERN_COUNT) * channels + c] += z * dim_scale;
            }
        }
        let row_scale = 1.0 / (text.rows().max(1) as f64).sqrt();
        let mut out = vec![0.0f64; channels * plane];
        for k in 0..PATTERN_COUNT {
            let pattern = &self.patterns[k * plane..(k + 1) * plane];
            for c in 0..channels {
                let weight = binned[k * channels + c] * row_scale;
                if weight == 0.0 {
                    continue;
                }
                for (o, p) in out[c * plane..(c + 1) * plane].iter_mut().zip(pattern) {
                    *o += weight * p;
                }
            }
        }
        Ok(out)
    }
}

impl NoisePredictor for SyntheticPredictor {
    fn predict(
        &self,
        ctx: &PredictionContext<'_>,
        latent: &LatentTensor,
        text: &TextRepresentation,
    ) -> Result<LatentTensor> {
        if latent.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.dims(),
                found: latent.shape().dims(),
            });
        }
        let ramp = 1.0 - ctx.timestep as f64 / self.train_steps as f64;
        let text_scale = self.text_coeff * ramp;
        let m = self.text_map(text)?;
        let data = latent
            .data()
            .iter()
            .zip(&m)
            .map(|(&l, &m)| (self.latent_coeff * f64::from(l) + text_scale * m) as f32)
            .collect();
        LatentTensor::from_vec(self.shape, data)
    }

    fn info(&self) -> PredictorInfo {
        PredictorInfo::Synthetic {
            latent_coeff: self.latent_coeff,
            text_coeff: self.text_coeff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub prompt_key: String,
    pub step: usize,
    pub branch: Branch,
    pub file: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ReplayManifest {
    entries: Vec<ReplayEntry>,
}

/// Replays noise predictions recorded from a real model run. The pack is a
/// directory whose `manifest.json` lists `{prompt_key, step, branch, file}`
/// entries pointing at DXT tensors of the latent's shape.
#[derive(Debug, Clone)]
pub struct ReplayPredictor {
    dir: PathBuf,
    files: BTreeMap<(String, usize, Branch), String>,
}

impl ReplayPredictor {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join(Self::MANIFEST);
        let bytes = fs::read(&manifest_path).map_err(|e| Error::file(&manifest_path, e))?;
        let manifest: ReplayManifest = serde_json::from_slice(&bytes)?;
        let files = manifest
            .entries
            .into_iter()
            .map(|e| ((e.prompt_key, e.step, e.branch), e.file))
            .collect();
        Ok(Self { dir, files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl NoisePredictor for ReplayPredictor {
    fn predict(
        &self,
        ctx: &PredictionContext<'_>,
        latent: &LatentTensor,
        _text: &TextRepresentation,
    ) -> Result<LatentTensor> {
        let key = (ctx.prompt_key.to_string(), ctx.step, ctx.branch);
        let file = self.files.get(&key).ok_or_else(|| Error::MissingReplay {
            prompt_key: ctx.prompt_key.to_string(),
            step: ctx.step,
            branch: ctx.branch.to_string(),
        })?;
        let (shape, data, _) = DxtTensor::load(self.dir.join(file))?.into_parts();
        if shape != latent.shape().dims() {
            return Err(Error::ShapeMismatch {
                expected: latent.shape().dims(),
                found: shape,
            });
        }
        LatentTensor::from_vec(latent.shape(), data)
    }

    fn info(&self) -> PredictorInfo {
        PredictorInfo::Ingested
    }
}

/// Wraps a predictor and keeps every prediction so it can be written out
/// as a replay pack.
pub struct RecordingPredictor<'a> {
    inner: &'a dyn NoisePredictor,
    recorded: Mutex<BTreeMap<(String, usize, Branch), LatentTensor>>,
}

impl<'a> RecordingPredictor<'a> {
    pub fn new(inner: &'a dyn NoisePredictor) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn write_pack(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let recorded = self.recorded.lock().expect("recorder lock");
        let mut manifest = ReplayManifest::default();
        for (i, ((prompt_key, step, branch), latent)) in recorded.iter().enumerate() {
            let file = format!("{i:06}.dxt");
            DxtTensor::new(latent.shape().dims(), latent.data().to_vec())?.save(dir.join(&file))?;
            manifest.entries.push(ReplayEntry {
                prompt_key: prompt_key.clone(),
                step: *step,
                branch: *branch,
                file,
            });
        }
        let path = dir.join(ReplayPredictor::MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::file(&path, e))
    }
}

impl NoisePredictor for RecordingPredictor<'_> {
    fn predict(
        &self,
        ctx: &PredictionContext<'_>,
        latent: &LatentTensor,
        text: &TextRepresentation,
    ) -> Result<LatentTensor> {
        let eps = self.inner.predict(ctx, latent, text)?;
        self.recorded
            .lock()
            .expect("recorder lock")
            .insert((ctx.prompt_key.to_string(), ctx.step, ctx.branch), eps.clone());
        Ok(eps)
    }

    fn info(&self) -> PredictorInfo {
        self.inner.info()
    }
}

/// Schedule settings carried alongside every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub train_steps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub sampler: String,
    pub seed: u64,
    pub steps_offset: usize,
    pub timesteps: Vec<usize>,
}

impl ScheduleMeta {
    pub fn new(schedule: &NoiseSchedule, seed: u64) -> Self {
        let c = schedule.config();
        Self {
            train_steps: c.train_steps,
            inference_steps: c.inference_steps,
            beta_start: c.beta_start,
            beta_end: c.beta_end,
            spacing: c.spacing,
            sampler: "ddim".into(),
            seed,
            steps_offset: schedule.steps_offset(),
            timesteps: schedule.timesteps().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: String,
    pub prompt_key: String,
    pub seed: u64,
    pub guidance_scale: f64,
    /// `inference_steps + 1` latents; index 0 is the initial noise.
    pub latents: Vec<LatentTensor>,
    pub schedule: ScheduleMeta,
}

impl Trajectory {
    pub fn final_latent(&self) -> &LatentTensor {
        self.latents.last().expect("trajectory is never empty")
    }

    pub fn shape(&self) -> LatentShape {
        self.latents[0].shape()
    }

    /// Packs all latents as one `[steps + 1, C, H, W]` DXT tensor with the
    /// run settings in the header metadata.
    pub fn to_dxt(&self) -> Result<DxtTensor> {
        let shape = self.shape();
        let mut dims = vec![self.latents.len()];
        dims.extend(shape.dims());
        let data = self.latents.iter().flat_map(|l| l.data().iter().copied()).collect();
        let meta = serde_json::json!({
            "prompt": self.prompt,
            "prompt_key": self.prompt_key,
            "seed": self.seed,
            "guidance_scale": self.guidance_scale,
            "schedule": self.schedule,
        });
        Ok(DxtTensor::new(dims, data)?.with_metadata(meta))
    }

    pub fn from_dxt(tensor: DxtTensor) -> Result<Self> {
        let (dims, data, meta) = tensor.into_parts();
        if dims.len() != 4 || dims[0] == 0 {
            return Err(Error::TensorFormat(format!(
                "trajectory tensors are [steps + 1, C, H, W], got {dims:?}"
            )));
        }
        let meta = meta.ok_or_else(|| Error::TensorFormat("trajectory file has no metadata".into()))?;
        #[derive(Deserialize)]
        struct Meta {
            prompt: String,
            prompt_key: String,
            seed: u64,
            guidance_scale: f64,
            schedule: ScheduleMeta,
        }
        let meta: Meta = serde_json::from_value(meta)?;
        let shape = LatentShape::new(dims[1], dims[2], dims[3]);
        let latents = data
            .chunks_exact(shape.len())
            .enumerate()
            .map(|(i, chunk)| LatentTensor::from_vec(shape, chunk.to_vec()).map(|l| l.with_timestep_index(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt: meta.prompt,
            prompt_key: meta.prompt_key,
            seed: meta.seed,
            guidance_scale: meta.guidance_scale,
            latents,
            schedule: meta.schedule,
        })
    }
}

/// Runs guided trajectories for one schedule, latent shape, text
/// conditioner and noise predictor.
pub struct Sampler<'a> {
    pub schedule: &'a NoiseSchedule,
    pub shape: LatentShape,
    pub conditioner: &'a Conditioner<'a>,
    pub predictor: &'a dyn NoisePredictor,
}

impl Sampler<'_> {
    pub fn guidance(&self, scale: f64) -> Result<GuidanceConfig> {
        GuidanceConfig::new(scale, self.conditioner.unconditional()?.clone())
    }

    pub fn run(&self, prompt_key: &str, prompt: &str, seed: u64, guidance: &GuidanceConfig) -> Result<Trajectory> {
        let (_, text) = self.conditioner.encode_prompt(prompt_key, prompt)?;
        self.run_encoded(prompt_key, prompt, &text, seed, guidance)
    }

    /// Same as [`Sampler::run`] with the prompt already encoded.
    pub fn run_encoded(
        &self,
        prompt_key: &str,
        prompt: &str,
        text: &TextRepresentation,
        seed: u64,
        guidance: &GuidanceConfig,
    ) -> Result<Trajectory> {
        let mut latents = Vec::with_capacity(self.schedule.inference_steps() + 1);
        latents.push(initial_noise(seed, self.shape));
        for (i, &t) in self.schedule.timesteps().iter().enumerate() {
            let latent = latents.last().expect("non-empty");
            let ctx = |branch| PredictionContext {
                prompt_key,
                step: i,
                timestep: t,
                branch,
            };
            let eps_cond = self.predictor.predict(&ctx(Branch::Cond), latent, text)?;
            let eps_uncond = self
                .predictor
                .predict(&ctx(Branch::Uncond), latent, guidance.unconditional())?;
            let eps = guide(&eps_uncond, &eps_cond, guidance.scale())?;
            let next = match self.schedule.step(latent, &eps, i) {
                Ok(next) if next.is_finite() => next,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLatent { step: i }),
                Err(e) => return Err(e),
            };
            latents.push(next);
        }
        Ok(Trajectory {
            prompt: prompt.to_string(),
            prompt_key: prompt_key.to_string(),
            seed,
            guidance_scale: guidance.scale(),
            latents,
            schedule: ScheduleMeta::new(self.schedule, seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_encoding::EncoderSource;

    fn tensor(values: &[f32]) -> LatentTensor {
        LatentTensor::from_vec(LatentShape::new(1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn guide_reduces_at_endpoints() {
        let u = tensor(&[0.25, -1.5, 3.0]);
        let c = tensor(&[1.0, 2.0, -0.125]);
        assert_eq!(guide(&u, &c, 0.0).unwrap(), u);
        assert_eq!(guide(&u, &c, 1.0).unwrap(), c);
        assert_eq!(guide(&tensor(&[0.0]), &tensor(&[1.0]), 7.0).unwrap(), tensor(&[7.0]));
    }

    #[test]
    fn guide_rejects_bad_inputs() {
        let u = tensor(&[0.0, 1.0]);
        assert!(matches!(guide(&u, &tensor(&[0.0]), 1.0), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(guide(&u, &u, f64::NAN), Err(Error::NonFinite(_))));
        let rep = TextRepresentation::new(1, 1, vec![0.0], EncoderSource::Synthetic).unwrap();
        assert!(GuidanceConfig::new(-1.0, rep.clone()).is_err());
        assert!(GuidanceConfig::new(f64::INFINITY, rep).is_err());
    }

    #[test]
    fn synthetic_zero_text_is_scaled_latent() {
        let shape = LatentShape::new(2, 4, 4);
        let p = SyntheticPredictor::new(shape, 8, 1000);
        let latent = initial_noise(5, shape);
        let text = TextRepresentation::new(3, 8, vec![0.0; 24], EncoderSource::Synthetic).unwrap();
        let ctx = PredictionContext {
            prompt_key: "k",
            step: 0,
            timestep: 500,
            branch: Branch::Cond,
        };
        let eps = p.predict(&ctx, &latent, &text).unwrap();
        assert_eq!(eps, latent);
    }

    #[test]
    fn synthetic_predictor_checks_shapes() {
        let shape = LatentShape::new(2, 4, 4);
        let p = SyntheticPredictor::new(shape, 8, 1000);
        let ctx = PredictionContext {
            prompt_key: "k",
            step: 0,
            timestep: 1,
            branch: Branch::Cond,
        };
        let wrong_dim = TextRepresentation::new(3, 4, vec![0.0; 12], EncoderSource::Synthetic).unwrap();
        assert!(p.predict(&ctx, &initial_noise(0, shape), &wrong_dim).is_err());
        let text = TextRepresentation::new(3, 8, vec![0.0; 24], EncoderSource::Synthetic).unwrap();
        let other = initial_noise(0, LatentShape::new(1, 4, 4));
        assert!(p.predict(&ctx, &other, &text).is_err());
    }
}
