//! Explainer bundles: everything the interactive UI needs, precomputed and
//! serialized as one canonical JSON document.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dxt::DxtTensor;
use crate::error::{Error, Result};
use crate::latent_imaging::{thumbnail, LinearDecoder, RgbImage, UpscaleMode};
use crate::rng::mix64;
use crate::sampler::{NoisePredictor, PredictorInfo, ReplayPredictor, Sampler, ScheduleMeta, SyntheticPredictor, Trajectory};
use crate::scheduler::{LatentShape, NoiseSchedule, ScheduleConfig};
use crate::text_encoding::{
    linkage_matrix, normalize, Conditioner, EncoderInfo, IngestedEncoder, SyntheticEncoder, TensorPack,
    TextEncoder, TextRepresentation, DEFAULT_EMBED_DIM,
};
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::trajectory_projection::{project_trajectories, Polyline, UmapParams};

pub const BUNDLE_VERSION: u64 = 1;
pub const DEFAULT_GUIDANCE_SCALES: [f64; 4] = [0.0, 1.0, 7.0, 20.0];

const DEFAULT_CATALOG: &str = include_str!("../assets/catalog/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogPrompt {
    pub key: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Catalog {
    #[serde(default)]
    pub description: String,
    pub prompts: Vec<CatalogPrompt>,
}

impl Catalog {
    /// The shipped demo catalog: 13 prompts, six pairs and one unpaired.
    pub fn demo() -> Self {
        Self::from_json(DEFAULT_CATALOG.as_bytes()).expect("shipped catalog is valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let catalog: Self = serde_json::from_slice(bytes)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut by_key = BTreeMap::new();
        for (i, p) in self.prompts.iter().enumerate() {
            if p.key.is_empty() {
                return Err(Error::InvalidParameter(format!("catalog prompt {i} has an empty key")));
            }
            if by_key.insert(p.key.as_str(), p).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate catalog key {:?}", p.key)));
            }
        }
        for p in &self.prompts {
            if let Some(pair) = &p.pair {
                let partner = by_key
                    .get(pair.as_str())
                    .ok_or_else(|| Error::InvalidParameter(format!("{:?} pairs with unknown key {pair:?}", p.key)))?;
                if partner.pair.as_deref() != Some(p.key.as_str()) || pair == &p.key {
                    return Err(Error::InvalidParameter(format!(
                        "pairing of {:?} and {pair:?} is not symmetric",
                        p.key
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pairs in catalog order, each listed once.
    pub fn pairs(&self) -> Vec<(&str, &str)> {
        let order: BTreeMap<&str, usize> = self.prompts.iter().enumerate().map(|(i, p)| (p.key.as_str(), i)).collect();
        self.prompts
            .iter()
            .filter_map(|p| {
                let pair = p.pair.as_deref()?;
                (order[p.key.as_str()] < order[pair]).then_some((p.key.as_str(), pair))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogSource {
    Path(PathBuf),
    Inline(Catalog),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
    },
    Ingested {
        pack: PathBuf,
    },
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Synthetic {
            seed: 0,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorConfig {
    #[default]
    Synthetic,
    Ingested {
        pack: PathBuf,
    },
}

impl std::str::FromStr for PredictorConfig {
    type Err = Error;

    /// `synthetic` or `ingested:<dir>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "synthetic" => Ok(PredictorConfig::Synthetic),
            Some(("ingested", dir)) if !dir.is_empty() => Ok(PredictorConfig::Ingested { pack: dir.into() }),
            _ => Err(Error::InvalidParameter(format!(
                "predictor must be `synthetic` or `ingested:<dir>`, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabPaths {
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ProjectionConfig {
    #[serde(flatten)]
    pub params: UmapParams,
    pub seed: u64,
}


/// Everything `build_bundle` needs. Relative paths are resolved against the
/// config file's directory by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Shipped demo catalog when absent.
    pub catalog: Option<CatalogSource>,
    pub seed: u64,
    pub latent_shape: [usize; 3],
    pub schedule: ScheduleConfig,
    pub guidance_scales: Vec<f64>,
    pub default_guidance: f64,
    /// Shipped CLIP vocabulary when absent.
    pub vocab: Option<VocabPaths>,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    /// Shipped decoder config when absent.
    pub decoder: Option<PathBuf>,
    pub thumbnail_width: usize,
    pub final_image_width: usize,
    pub upscale: UpscaleMode,
    pub projection: ProjectionConfig,
    /// Directory of `<prompt key>.png` final images captured from a real
    /// model; prompts without one fall back to an upscaled linear decode.
    pub final_images: Option<PathBuf>,
    /// Tensor pack of unit vectors keyed `<prompt key>:text` and
    /// `<prompt key>:image`.
    pub linkage_pack: Option<PathBuf>,
    pub include_latents: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            catalog: None,
            seed: 0,
            latent_shape: [4, 32, 32],
            schedule: ScheduleConfig::default(),
            guidance_scales: DEFAULT_GUIDANCE_SCALES.to_vec(),
            default_guidance: 7.0,
            vocab: None,
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            decoder: None,
            thumbnail_width: 64,
            final_image_width: 256,
            upscale: UpscaleMode::Bilinear,
            projection: ProjectionConfig::default(),
            final_images: None,
            linkage_pack: None,
            include_latents: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        let mut config: Self = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(CatalogSource::Path(p)) = &mut self.catalog {
            fix(p);
        }
        if let Some(v) = &mut self.vocab {
            fix(&mut v.vocab);
            fix(&mut v.merges);
        }
        if let EncoderConfig::Ingested { pack } = &mut self.encoder {
            fix(pack);
        }
        if let PredictorConfig::Ingested { pack } = &mut self.predictor {
            fix(pack);
        }
        for p in [&mut self.decoder, &mut self.final_images, &mut self.linkage_pack]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn catalog(&self) -> Result<Catalog> {
        match &self.catalog {
            None => Ok(Catalog::demo()),
            Some(CatalogSource::Path(p)) => Catalog::load(p),
            Some(CatalogSource::Inline(c)) => {
                c.validate()?;
                Ok(c.clone())
            }
        }
    }

    pub fn latent_shape(&self) -> LatentShape {
        let [c, h, w] = self.latent_shape;
        LatentShape::new(c, h, w)
    }

    fn validate(&self) -> Result<()> {
        if self.guidance_scales.is_empty() {
            return Err(Error::InvalidParameter("guidance_scales is empty".into()));
        }
        if !self.guidance_scales.contains(&self.default_guidance) {
            return Err(Error::InvalidParameter(format!(
                "default guidance {} is not among the guidance scales",
                self.default_guidance
            )));
        }
        let distinct: BTreeSet<u64> = self.guidance_scales.iter().map(|s| s.to_bits()).collect();
        if distinct.len() != self.guidance_scales.len() {
            return Err(Error::InvalidParameter("guidance scales repeat".into()));
        }
        if self.latent_shape.contains(&0) {
            return Err(Error::InvalidParameter(format!("latent shape {:?}", self.latent_shape)));
        }
        let [_, h, w] = self.latent_shape;
        if self.thumbnail_width < w || self.final_image_width < w {
            return Err(Error::InvalidParameter(format!(
                "image widths must be at least the latent width {w}"
            )));
        }
        if !(self.thumbnail_width * h).is_multiple_of(w) || !(self.final_image_width * h).is_multiple_of(w) {
            return Err(Error::InvalidParameter("image widths must keep the latent aspect ratio".into()));
        }
        Ok(())
    }
}

/// The configured pipeline components.
pub struct Engine {
    pub vocab: Vocabulary,
    pub encoder: Box<dyn TextEncoder>,
    pub predictor: Box<dyn NoisePredictor>,
    pub schedule: NoiseSchedule,
    pub decoder: LinearDecoder,
    pub shape: LatentShape,
}

impl Engine {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let vocab = match &config.vocab {
            None => Vocabulary::clip(),
            Some(paths) => {
                let vocab = fs::File::open(&paths.vocab).map_err(|e| Error::file(&paths.vocab, e))?;
                let merges = fs::File::open(&paths.merges).map_err(|e| Error::file(&paths.merges, e))?;
                Vocabulary::load(std::io::BufReader::new(vocab), std::io::BufReader::new(merges))?
            }
        };
        let encoder: Box<dyn TextEncoder> = match &config.encoder {
            EncoderConfig::Synthetic { seed, embed_dim } => Box::new(SyntheticEncoder::new(*seed, *embed_dim)),
            EncoderConfig::Ingested { pack } => Box::new(IngestedEncoder::from_pack(TensorPack::open(pack)?)?),
        };
        let shape = config.latent_shape();
        let schedule = NoiseSchedule::build(config.schedule.clone())?;
        let predictor: Box<dyn NoisePredictor> = match &config.predictor {
            PredictorConfig::Synthetic => Box::new(SyntheticPredictor::new(
                shape,
                encoder.embed_dim(),
                config.schedule.train_steps,
            )),
            PredictorConfig::Ingested { pack } => Box::new(ReplayPredictor::open(pack)?),
        };
        let decoder = match &config.decoder {
            None => LinearDecoder::default_rgb(),
            Some(p) => LinearDecoder::load(p)?,
        };
        if decoder.channels() != shape.channels {
            return Err(Error::ChannelMismatch {
                expected: decoder.channels(),
                found: shape.channels,
            });
        }
        Ok(Self {
            vocab,
            encoder,
            predictor,
            schedule,
            decoder,
            shape,
        })
    }
}

/// PNG bytes, serialized as base64. Deserializing checks both the base64
/// and the PNG stream (chunk CRCs and image data).
#[derive(Clone, PartialEq, Eq)]
pub struct PngData(Vec<u8>);

impl PngData {
    pub fn encode(img: &RgbImage) -> Result<Self> {
        Ok(Self(img.to_png()?))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        RgbImage::from_png(&bytes)?;
        Ok(Self(bytes))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn decode(&self) -> Result<RgbImage> {
        RgbImage::from_png(&self.0)
    }
}

impl std::fmt::Debug for PngData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PngData({} bytes)", self.0.len())
    }
}

impl Serialize for PngData {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for PngData {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = BASE64
            .decode(text.as_bytes())
            .map_err(|e| de::Error::custom(format!("invalid base64: {e}")))?;
        Self::from_bytes(bytes).map_err(|e| de::Error::custom(format!("invalid PNG: {e}")))
    }
}

/// A DXT tensor file, serialized as base64.
#[derive(Clone, PartialEq)]
pub struct DxtData(Vec<u8>);

impl DxtData {
    pub fn encode(tensor: &DxtTensor) -> Self {
        Self(tensor.to_bytes())
    }

    pub fn decode(&self) -> Result<DxtTensor> {
        DxtTensor::from_bytes(&self.0)
    }
}

impl std::fmt::Debug for DxtData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DxtData({} bytes)", self.0.len())
    }
}

impl Serialize for DxtData {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for DxtData {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = BASE64
            .decode(text.as_bytes())
            .map_err(|e| de::Error::custom(format!("invalid base64: {e}")))?;
        DxtTensor::from_bytes(&bytes).map_err(|e| de::Error::custom(format!("invalid tensor: {e}")))?;
        Ok(Self(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerMeta {
    pub vocab_size: usize,
    pub max_length: usize,
    pub begin_id: u32,
    pub end_id: u32,
    pub pad_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    pub thumbnail_width: usize,
    pub thumbnail_height: usize,
    pub final_width: usize,
    pub final_height: usize,
    pub upscale: UpscaleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionMeta {
    pub params: UmapParams,
    pub seed: u64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMetadata {
    pub seed: u64,
    pub latent_shape: [usize; 3],
    pub schedule: ScheduleMeta,
    pub guidance_scales: Vec<f64>,
    pub default_guidance: f64,
    pub tokenizer: TokenizerMeta,
    pub encoder: EncoderInfo,
    pub predictor: PredictorInfo,
    pub decoder: LinearDecoder,
    pub images: ImageMeta,
    pub projection: ProjectionMeta,
    pub catalog: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenPiece {
    pub id: u32,
    pub token: String,
    /// Character range `[start, end)` in the prompt; null for markers.
    pub span: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenView {
    pub ids: Vec<u32>,
    pub content_len: usize,
    /// Begin marker, content tokens and end marker; padding omitted.
    pub pieces: Vec<TokenPiece>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordToken {
    /// Position in `tokens.ids`.
    pub index: usize,
    pub token: String,
    pub span: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceVariant {
    pub scale: f64,
    /// One per latent, initial noise first.
    pub thumbnails: Vec<PngData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<DxtData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    LinearDecode,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEntry {
    pub key: String,
    pub text: String,
    pub pair_key: Option<String>,
    pub keywords_diff: Vec<KeywordToken>,
    pub tokens: TokenView,
    pub final_image: PngData,
    pub final_image_source: ImageSource,
    pub variants: Vec<GuidanceVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionEntry {
    pub prompt_keys: [String; 2],
    pub polylines: Vec<Polyline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkageSource {
    Synthetic,
    Ingested,
}

/// `similarity[i][j]` is the cosine similarity of prompt `i`'s text vector
/// with prompt `j`'s image vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linkage {
    pub source: LinkageSource,
    pub prompt_keys: Vec<String>,
    pub similarity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainerBundle {
    pub version: u64,
    pub metadata: BundleMetadata,
    pub prompts: Vec<PromptEntry>,
    pub projections: Vec<ProjectionEntry>,
    pub linkage: Linkage,
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn token_view(vocab: &Vocabulary, seq: &TokenSequence) -> TokenView {
    let spans = std::iter::once(None)
        .chain(seq.spans().iter().copied())
        .chain(std::iter::once(None));
    let pieces = seq.ids()[..seq.end_position() + 1]
        .iter()
        .zip(spans)
        .map(|(&id, span)| TokenPiece {
            id,
            token: vocab.token(id).unwrap_or_default().to_string(),
            span: span.map(|s| [s.start, s.end]),
        })
        .collect();
    TokenView {
        ids: seq.ids().to_vec(),
        content_len: seq.content_len(),
        pieces,
    }
}

/// Content tokens of `own` that are not part of a longest common
/// subsequence with `other`.
pub fn keywords_diff(own: &TokenView, other: &TokenView) -> Vec<KeywordToken> {
    let a = &own.ids[1..=own.content_len];
    let b = &other.ids[1..=other.content_len];
    let (n, m) = (a.len(), b.len());
    let mut lcs = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if a[i] == b[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut diff = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n {
        if j < m && a[i] == b[j] {
            i += 1;
            j += 1;
        } else if j < m && lcs[i][j + 1] > lcs[i + 1][j] {
            j += 1;
        } else {
            let piece = &own.pieces[i + 1];
            diff.push(KeywordToken {
                index: i + 1,
                token: piece.token.clone(),
                span: piece.span,
            });
            i += 1;
        }
    }
    diff
}

const IMAGE_VECTOR_SALT: u64 = 0x4f1b_bcdc_bfa5_3e0b;

/// Mean of the rows from the begin marker through the end marker,
/// normalized.
fn text_vector(rep: &TextRepresentation, tokens: &TokenSequence) -> Result<Vec<f32>> {
    let rows = tokens.end_position() + 1;
    let mut acc = vec![0.0f64; rep.embed_dim()];
    for i in 0..rows {
        for (a, &v) in acc.iter_mut().zip(rep.row(i)) {
            *a += f64::from(v);
        }
    }
    normalize(&acc.iter().map(|&v| (v / rows as f64) as f32).collect::<Vec<_>>())
}

/// Random ±1 projection of the final latent to `dim` columns, normalized.
fn image_vector(latent: &[f32], dim: usize) -> Result<Vec<f32>> {
    let mut acc = vec![0.0f64; dim];
    for (n, &v) in latent.iter().enumerate() {
        let v = f64::from(v);
        for (j, a) in acc.iter_mut().enumerate() {
            let sign = if mix64(IMAGE_VECTOR_SALT ^ ((n as u64) << 32 | j as u64)) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            *a += sign * v;
        }
    }
    normalize(&acc.iter().map(|&v| v as f32).collect::<Vec<_>>())
}

fn linkage_vector(pack: &TensorPack, key: &str) -> Result<Vec<f32>> {
    let (shape, data, _) = pack.get(key)?.into_parts();
    if shape.len() != 1 {
        return Err(Error::ShapeMismatch {
            expected: vec![data.len()],
            found: shape,
        });
    }
    Ok(data)
}

pub fn build_bundle(config: &RunConfig) -> Result<ExplainerBundle> {
    let catalog = config.catalog()?;
    let engine = Engine::from_config(config)?;
    build_bundle_with(config, &catalog, &engine)
}

struct Built {
    entry: PromptEntry,
    trajectory: Trajectory,
    text_vector: Vec<f32>,
}

pub fn build_bundle_with(config: &RunConfig, catalog: &Catalog, engine: &Engine) -> Result<ExplainerBundle> {
    config.validate()?;
    catalog.validate()?;
    let shape = engine.shape;
    let conditioner = Conditioner::new(&engine.vocab, engine.encoder.as_ref());
    let sampler = Sampler {
        schedule: &engine.schedule,
        shape,
        conditioner: &conditioner,
        predictor: engine.predictor.as_ref(),
    };
    let thumb_h = config.thumbnail_width * shape.height / shape.width;
    let final_h = config.final_image_width * shape.height / shape.width;

    let mut built: Vec<Built> = Vec::with_capacity(catalog.prompts.len());
    for prompt in &catalog.prompts {
        let key = prompt.key.as_str();
        let (tokens, rep) = conditioner
            .encode_prompt(key, &prompt.text)
            .map_err(|e| e.at_stage(key, "encode"))?;
        let mut variants = Vec::with_capacity(config.guidance_scales.len());
        let mut default_trajectory = None;
        for &scale in &config.guidance_scales {
            let guidance = sampler.guidance(scale).map_err(|e| e.at_stage(key, "encode"))?;
            let trajectory = sampler
                .run_encoded(key, &prompt.text, &rep, config.seed, &guidance)
                .map_err(|e| e.at_stage(key, "sample"))?;
            let thumbnails = trajectory
                .latents
                .iter()
                .map(|l| PngData::encode(&thumbnail(l, &engine.decoder, config.thumbnail_width, config.upscale)?))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at_stage(key, "thumbnail"))?;
            let latents = if config.include_latents {
                Some(DxtData::encode(&trajectory.to_dxt().map_err(|e| e.at_stage(key, "sample"))?))
            } else {
                None
            };
            variants.push(GuidanceVariant {
                scale,
                thumbnails,
                latents,
            });
            if scale == config.default_guidance {
                default_trajectory = Some(trajectory);
            }
        }
        let trajectory = default_trajectory.expect("validated: default scale is configured");
        let ingested = config
            .final_images
            .as_ref()
            .map(|dir| dir.join(format!("{key}.png")))
            .filter(|p| p.is_file());
        let (final_image, final_image_source) = match ingested {
            Some(path) => {
                let bytes = fs::read(&path).map_err(|e| Error::file(&path, e).at_stage(key, "final_image"))?;
                let png = PngData::from_bytes(bytes).map_err(|e| e.at_stage(key, "final_image"))?;
                (png, ImageSource::Ingested)
            }
            None => {
                let img = thumbnail(
                    trajectory.final_latent(),
                    &engine.decoder,
                    config.final_image_width,
                    config.upscale,
                )
                .and_then(|img| PngData::encode(&img))
                .map_err(|e| e.at_stage(key, "final_image"))?;
                (img, ImageSource::LinearDecode)
            }
        };
        let text_vector = text_vector(&rep, &tokens).map_err(|e| e.at_stage(key, "linkage"))?;
        built.push(Built {
            entry: PromptEntry {
                key: key.to_string(),
                text: prompt.text.clone(),
                pair_key: prompt.pair.clone(),
                keywords_diff: Vec::new(),
                tokens: token_view(&engine.vocab, &tokens),
                final_image,
                final_image_source,
                variants,
            },
            trajectory,
            text_vector,
        });
    }

    let index: BTreeMap<&str, usize> = catalog
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| (p.key.as_str(), i))
        .collect();
    let mut projections = Vec::new();
    for (a, b) in catalog.pairs() {
        let (ia, ib) = (index[a], index[b]);
        let diff_a = keywords_diff(&built[ia].entry.tokens, &built[ib].entry.tokens);
        let diff_b = keywords_diff(&built[ib].entry.tokens, &built[ia].entry.tokens);
        if diff_a.is_empty() && diff_b.is_empty() {
            return Err(Error::InvalidParameter(format!("paired prompts {a:?} and {b:?} tokenize identically"))
                .at_stage(a, "tokenize"));
        }
        built[ia].entry.keywords_diff = diff_a;
        built[ib].entry.keywords_diff = diff_b;
        let pair = [built[ia].trajectory.clone(), built[ib].trajectory.clone()];
        let (mut polylines, _) = project_trajectories(&pair, &config.projection.params, config.projection.seed)
            .map_err(|e| e.at_stage(a, "project"))?;
        for line in &mut polylines {
            for p in &mut line.points {
                *p = [round_sig6(p[0]), round_sig6(p[1])];
            }
        }
        projections.push(ProjectionEntry {
            prompt_keys: [a.to_string(), b.to_string()],
            polylines,
        });
    }

    let linkage = build_linkage(config, engine, &built)?;
    let (a, b) = crate::trajectory_projection::fit_ab(config.projection.params.min_dist, config.projection.params.spread)?;
    let metadata = BundleMetadata {
        seed: config.seed,
        latent_shape: config.latent_shape,
        schedule: ScheduleMeta::new(&engine.schedule, config.seed),
        guidance_scales: config.guidance_scales.clone(),
        default_guidance: config.default_guidance,
        tokenizer: TokenizerMeta {
            vocab_size: engine.vocab.len(),
            max_length: engine.vocab.max_length(),
            begin_id: engine.vocab.begin_id(),
            end_id: engine.vocab.end_id(),
            pad_id: engine.vocab.pad_id(),
        },
        encoder: engine.encoder.info(),
        predictor: engine.predictor.info(),
        decoder: engine.decoder.clone(),
        images: ImageMeta {
            thumbnail_width: config.thumbnail_width,
            thumbnail_height: thumb_h,
            final_width: config.final_image_width,
            final_height: final_h,
            upscale: config.upscale,
        },
        projection: ProjectionMeta {
            params: config.projection.params,
            seed: config.projection.seed,
            a: round_sig6(a),
            b: round_sig6(b),
        },
        catalog: catalog.description.clone(),
    };
    let bundle = ExplainerBundle {
        version: BUNDLE_VERSION,
        metadata,
        prompts: built.into_iter().map(|b| b.entry).collect(),
        projections,
        linkage,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn build_linkage(config: &RunConfig, engine: &Engine, built: &[Built]) -> Result<Linkage> {
    let prompt_keys: Vec<String> = built.iter().map(|b| b.entry.key.clone()).collect();
    let (source, texts, images) = match &config.linkage_pack {
        Some(dir) => {
            let pack = TensorPack::open(dir)?;
            let mut texts = Vec::new();
            let mut images = Vec::new();
            for key in &prompt_keys {
                texts.push(linkage_vector(&pack, &format!("{key}:text")).map_err(|e| e.at_stage(key, "linkage"))?);
                images.push(linkage_vector(&pack, &format!("{key}:image")).map_err(|e| e.at_stage(key, "linkage"))?);
            }
            (LinkageSource::Ingested, texts, images)
        }
        None => {
            let dim = engine.encoder.embed_dim();
            let images = built
                .iter()
                .map(|b| image_vector(b.trajectory.final_latent().data(), dim).map_err(|e| e.at_stage(&b.entry.key, "linkage")))
                .collect::<Result<Vec<_>>>()?;
            (LinkageSource::Synthetic, built.iter().map(|b| b.text_vector.clone()).collect(), images)
        }
    };
    let similarity = linkage_matrix(&texts, &images)?
        .into_iter()
        .map(|row| row.into_iter().map(round_sig6).collect())
        .collect();
    Ok(Linkage {
        source,
        prompt_keys,
        similarity,
    })
}

fn schema_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl ExplainerBundle {
    /// Semantic checks beyond the JSON shape: referential integrity and
    /// counting contracts.
    pub fn validate(&self) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: BUNDLE_VERSION,
            });
        }
        let meta = &self.metadata;
        let steps = meta.schedule.inference_steps;
        if meta.schedule.timesteps.len() != steps {
            return Err(schema_error("metadata.schedule.timesteps", "length differs from inference_steps"));
        }
        if meta.guidance_scales.is_empty() {
            return Err(schema_error("metadata.guidance_scales", "no guidance scales"));
        }
        if !meta.guidance_scales.contains(&meta.default_guidance) {
            return Err(schema_error("metadata.default_guidance", "not among guidance_scales"));
        }
        let mut keys = BTreeMap::new();
        for (i, p) in self.prompts.iter().enumerate() {
            if keys.insert(p.key.as_str(), i).is_some() {
                return Err(schema_error(format!("prompts[{i}].key"), format!("duplicate key {:?}", p.key)));
            }
        }
        for (i, p) in self.prompts.iter().enumerate() {
            let at = |field: &str| format!("prompts[{i}].{field}");
            if let Some(pair) = &p.pair_key {
                let partner = keys
                    .get(pair.as_str())
                    .map(|&j| &self.prompts[j])
                    .ok_or_else(|| schema_error(at("pair_key"), format!("unknown key {pair:?}")))?;
                if partner.pair_key.as_deref() != Some(p.key.as_str()) || pair == &p.key {
                    return Err(schema_error(at("pair_key"), "pairing is not symmetric"));
                }
                if partner.tokens.ids == p.tokens.ids {
                    return Err(schema_error(at("tokens"), "paired prompts have identical tokens"));
                }
            }
            if p.tokens.ids.len() != meta.tokenizer.max_length {
                return Err(schema_error(at("tokens.ids"), "length differs from tokenizer.max_length"));
            }
            if p.tokens.pieces.len() != p.tokens.content_len + 2 {
                return Err(schema_error(at("tokens.pieces"), "expected content_len + 2 pieces"));
            }
            let scales: Vec<f64> = p.variants.iter().map(|v| v.scale).collect();
            if scales != meta.guidance_scales {
                return Err(schema_error(at("variants"), "scales differ from metadata.guidance_scales"));
            }
            for (v, variant) in p.variants.iter().enumerate() {
                if variant.thumbnails.len() != steps + 1 {
                    return Err(schema_error(
                        at(&format!("variants[{v}].thumbnails")),
                        format!("expected {} thumbnails, found {}", steps + 1, variant.thumbnails.len()),
                    ));
                }
            }
        }
        for (i, proj) in self.projections.iter().enumerate() {
            let [a, b] = &proj.prompt_keys;
            let pa = keys
                .get(a.as_str())
                .map(|&j| &self.prompts[j])
                .ok_or_else(|| schema_error(format!("projections[{i}].prompt_keys"), format!("unknown key {a:?}")))?;
            if !keys.contains_key(b.as_str()) || pa.pair_key.as_deref() != Some(b.as_str()) {
                return Err(schema_error(format!("projections[{i}].prompt_keys"), "keys are not a pair"));
            }
            let ids: Vec<&str> = proj.polylines.iter().map(|l| l.trajectory_id.as_str()).collect();
            if ids != [a.as_str(), b.as_str()] {
                return Err(schema_error(format!("projections[{i}].polylines"), "ids differ from prompt_keys"));
            }
            for (l, line) in proj.polylines.iter().enumerate() {
                if line.points.len() != steps + 1 {
                    return Err(schema_error(
                        format!("projections[{i}].polylines[{l}].points"),
                        format!("expected {} points", steps + 1),
                    ));
                }
            }
        }
        let n = self.prompts.len();
        let linkage_keys: Vec<&str> = self.linkage.prompt_keys.iter().map(String::as_str).collect();
        let prompt_keys: Vec<&str> = self.prompts.iter().map(|p| p.key.as_str()).collect();
        if linkage_keys != prompt_keys {
            return Err(schema_error("linkage.prompt_keys", "differ from the prompt list"));
        }
        if self.linkage.similarity.len() != n || self.linkage.similarity.iter().any(|r| r.len() != n) {
            return Err(schema_error("linkage.similarity", format!("expected a {n}x{n} matrix")));
        }
        if self.linkage.similarity.iter().flatten().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(schema_error("linkage.similarity", "values outside [-1, 1]"));
        }
        Ok(())
    }
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            out.push('{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push(':');
                write_canonical(v, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(v, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).expect("scalar serializes")),
    }
}

/// Canonical JSON: object keys sorted, no whitespace.
pub fn to_canonical_json(value: &impl Serialize) -> Result<String> {
    let value = serde_json::to_value(value)?;
    let mut out = String::new();
    write_canonical(&value, &mut out);
    Ok(out)
}

pub fn save_bundle(bundle: &ExplainerBundle) -> Result<Vec<u8>> {
    Ok(to_canonical_json(bundle)?.into_bytes())
}

/// Parses and validates a bundle. The version is checked before the rest
/// of the document; other problems are reported with their JSON path.
pub fn load_bundle(bytes: &[u8]) -> Result<ExplainerBundle> {
    #[derive(Deserialize)]
    struct VersionProbe {
        version: Option<Value>,
    }
    if let Ok(probe) = serde_json::from_slice::<VersionProbe>(bytes) {
        match probe.version {
            None => return Err(schema_error("version", "missing field")),
            Some(Value::Number(n)) if n.as_u64().is_some() => {
                let found = n.as_u64().expect("checked");
                if found != BUNDLE_VERSION {
                    return Err(Error::VersionMismatch {
                        found,
                        expected: BUNDLE_VERSION,
                    });
                }
            }
            Some(_) => return Err(schema_error("version", "expected a non-negative integer")),
        }
    }
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let bundle: ExplainerBundle = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        schema_error(path, e.into_inner().to_string())
    })?;
    de.end().map_err(|e| schema_error(".", e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(bundle: &ExplainerBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, save_bundle(bundle)?).map_err(|e| Error::file(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<ExplainerBundle> {
    let path = path.as_ref();
    load_bundle(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_catalog_shape() {
        let c = Catalog::demo();
        assert_eq!(c.prompts.len(), 13);
        assert_eq!(c.pairs().len(), 6);
        assert_eq!(c.prompts.iter().filter(|p| p.pair.is_none()).count(), 1);
    }

    #[test]
    fn catalog_rejects_bad_pairs() {
        let one_sided = br#"{"prompts":[{"key":"a","text":"x","pair":"b"},{"key":"b","text":"y"}]}"#;
        assert!(Catalog::from_json(one_sided).is_err());
        let dangling = br#"{"prompts":[{"key":"a","text":"x","pair":"zz"}]}"#;
        assert!(Catalog::from_json(dangling).is_err());
        let dup = br#"{"prompts":[{"key":"a","text":"x"},{"key":"a","text":"y"}]}"#;
        assert!(Catalog::from_json(dup).is_err());
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(round_sig6(1.23456789), 1.23457);
        assert_eq!(round_sig6(-0.000123456789), -0.000123457);
        assert_eq!(round_sig6(0.0), 0.0);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let v = serde_json::json!({"b": 1, "a": {"d": [1, {"z": 0, "y": 1}], "c": "x"}});
        assert_eq!(to_canonical_json(&v).unwrap(), r#"{"a":{"c":"x","d":[1,{"y":1,"z":0}]},"b":1}"#);
    }

    #[test]
    fn predictor_flag_parsing() {
        assert_eq!("synthetic".parse::<PredictorConfig>().unwrap(), PredictorConfig::Synthetic);
        assert_eq!(
            "ingested:/tmp/pack".parse::<PredictorConfig>().unwrap(),
            PredictorConfig::Ingested { pack: "/tmp/pack".into() }
        );
        assert!("ingested:".parse::<PredictorConfig>().is_err());
        assert!("unet".parse::<PredictorConfig>().is_err());
    }

    #[test]
    fn version_checked_first() {
        assert!(matches!(
            load_bundle(br#"{"version": 2, "anything": true}"#),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(load_bundle(br#"{"prompts": []}"#), Err(Error::Schema { .. })));
    }
}
