//! Per-token text representations and text↔image similarity.
//!
//! Encoders are plugins behind [`TextEncoder`]:
//!
//! * [`SyntheticEncoder`] fills entry `(i, j)` with
//!   `(u - 0.5) * sqrt(12)` where `u` is the top 53 bits of
//!   `mix64(mix64(seed ^ SALT) ^ (ids[i] << 32 | j))` scaled to `[0, 1)`.
//!   Entries have zero mean and unit variance, and row `i` depends only on
//!   `ids[i]`.
//! * [`IngestedEncoder`] replays tensors produced offline by a real text
//!   encoder, looked up by prompt key in a [`TensorPack`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::dxt::DxtTensor;
use crate::error::{Error, Result};
use crate::rng::{mix64, unit_from_hash};
use crate::tokenizer::{TokenSequence, Vocabulary};

pub const DEFAULT_EMBED_DIM: usize = 768;

/// Prompt key under which the empty-prompt representation is stored.
pub const UNCONDITIONAL_KEY: &str = "__unconditional__";

const SYNTHETIC_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    Ingested,
    Synthetic,
}

/// A `rows x embed_dim` matrix of finite values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRepresentation {
    rows: usize,
    embed_dim: usize,
    vectors: Vec<f32>,
    source: EncoderSource,
}

impl TextRepresentation {
    pub fn new(rows: usize, embed_dim: usize, vectors: Vec<f32>, source: EncoderSource) -> Result<Self> {
        if vectors.len() != rows * embed_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![rows, embed_dim],
                found: vec![vectors.len()],
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "text representation entry ({}, {})",
                pos / embed_dim.max(1),
                pos % embed_dim.max(1)
            )));
        }
        Ok(Self {
            rows,
            embed_dim,
            vectors,
            source,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn source(&self) -> EncoderSource {
        self.source
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.vectors[i * self.embed_dim..(i + 1) * self.embed_dim]
    }
}

/// Settings recorded in bundle metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderInfo {
    Synthetic { seed: u64, embed_dim: usize },
    Ingested { embed_dim: usize },
}

pub trait TextEncoder: Send + Sync {
    /// Encodes `tokens`; `prompt_key` identifies the prompt for encoders
    /// that look up precomputed tensors.
    fn encode(&self, prompt_key: &str, tokens: &TokenSequence) -> Result<TextRepresentation>;

    fn embed_dim(&self) -> usize;

    fn info(&self) -> EncoderInfo;
}

#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    seed: u64,
    embed_dim: usize,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, embed_dim: usize) -> Self {
        Self { seed, embed_dim }
    }

    /// The documented hash value for token `id`, column `col`.
    pub fn entry(seed: u64, id: u32, col: usize) -> f32 {
        let key = (u64::from(id) << 32) | col as u64;
        let h = mix64(mix64(seed ^ SYNTHETIC_SALT) ^ key);
        ((unit_from_hash(h) - 0.5) * 12f64.sqrt()) as f32
    }
}

impl TextEncoder for SyntheticEncoder {
    fn encode(&self, _prompt_key: &str, tokens: &TokenSequence) -> Result<TextRepresentation> {
        let dim = self.embed_dim;
        let mut vectors = Vec::with_capacity(tokens.len() * dim);
        for &id in tokens.ids() {
            vectors.extend((0..dim).map(|j| Self::entry(self.seed, id, j)));
        }
        TextRepresentation::new(tokens.len(), dim, vectors, EncoderSource::Synthetic)
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn info(&self) -> EncoderInfo {
        EncoderInfo::Synthetic {
            seed: self.seed,
            embed_dim: self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// A directory of DXT tensors indexed by `manifest.json`
/// (`{"<prompt key>": {"file": .., "shape": [..], "dtype": "f32"}}`).
#[derive(Debug, Clone)]
pub struct TensorPack {
    dir: PathBuf,
    entries: BTreeMap<String, PackEntry>,
}

impl TensorPack {
    pub const MANIFEST: &'static str = "manifest.json";

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = dir.join(Self::MANIFEST);
        let text = fs::read(&manifest).map_err(|e| Error::file(&manifest, e))?;
        let entries = serde_json::from_slice(&text)?;
        Ok(Self { dir, entries })
    }

    /// Writes `tensors` as `<index>.dxt` files plus a manifest.
    pub fn create(dir: impl AsRef<Path>, tensors: &BTreeMap<String, DxtTensor>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let mut entries = BTreeMap::new();
        for (i, (key, tensor)) in tensors.iter().enumerate() {
            let file = format!("{i:05}.dxt");
            tensor.save(dir.join(&file))?;
            entries.insert(
                key.clone(),
                PackEntry {
                    file,
                    shape: tensor.shape().to_vec(),
                    dtype: "f32".into(),
                },
            );
        }
        let manifest = dir.join(Self::MANIFEST);
        fs::write(&manifest, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::file(&manifest, e))?;
        Ok(Self { dir, entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, key: &str) -> Option<&PackEntry> {
        self.entries.get(key)
    }

    pub fn get(&self, key: &str) -> Result<DxtTensor> {
        let entry = self.entries.get(key).ok_or_else(|| Error::MissingTensor(key.to_string()))?;
        if entry.dtype != "f32" {
            return Err(Error::TensorFormat(format!("{key}: unsupported dtype {:?}", entry.dtype)));
        }
        let tensor = DxtTensor::load(self.dir.join(&entry.file))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: entry.shape.clone(),
                found: tensor.shape().to_vec(),
            });
        }
        Ok(tensor)
    }
}

#[derive(Debug, Clone)]
pub struct IngestedEncoder {
    pack: TensorPack,
    embed_dim: usize,
}

impl IngestedEncoder {
    /// Every pack entry must be a `[rows, embed_dim]` matrix.
    pub fn new(pack: TensorPack, embed_dim: usize) -> Self {
        Self { pack, embed_dim }
    }

    /// Takes `embed_dim` from the pack's manifest.
    pub fn from_pack(pack: TensorPack) -> Result<Self> {
        let embed_dim = pack
            .entries
            .values()
            .find_map(|e| (e.shape.len() == 2).then_some(e.shape[1]))
            .ok_or_else(|| Error::InvalidParameter("tensor pack has no 2-D entries".into()))?;
        Ok(Self::new(pack, embed_dim))
    }
}

impl TextEncoder for IngestedEncoder {
    fn encode(&self, prompt_key: &str, tokens: &TokenSequence) -> Result<TextRepresentation> {
        let tensor = self.pack.get(prompt_key)?;
        let expected = [tokens.len(), self.embed_dim];
        if tensor.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        let (_, data, _) = tensor.into_parts();
        TextRepresentation::new(tokens.len(), self.embed_dim, data, EncoderSource::Ingested)
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn info(&self) -> EncoderInfo {
        EncoderInfo::Ingested {
            embed_dim: self.embed_dim,
        }
    }
}

/// Tokenizes and encodes prompts, caching the unconditional
/// (empty-prompt) representation used for guidance.
pub struct Conditioner<'a> {
    vocab: &'a Vocabulary,
    encoder: &'a dyn TextEncoder,
    unconditional: OnceLock<TextRepresentation>,
}

impl<'a> Conditioner<'a> {
    pub fn new(vocab: &'a Vocabulary, encoder: &'a dyn TextEncoder) -> Self {
        Self {
            vocab,
            encoder,
            unconditional: OnceLock::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.vocab
    }

    pub fn encoder(&self) -> &dyn TextEncoder {
        self.encoder
    }

    pub fn encode_prompt(&self, prompt_key: &str, text: &str) -> Result<(TokenSequence, TextRepresentation)> {
        let tokens = self.vocab.tokenize(text);
        let rep = self.encoder.encode(prompt_key, &tokens)?;
        Ok((tokens, rep))
    }

    /// `encode(tokenize(""))`, computed once.
    pub fn unconditional(&self) -> Result<&TextRepresentation> {
        if let Some(rep) = self.unconditional.get() {
            return Ok(rep);
        }
        let (_, rep) = self.encode_prompt(UNCONDITIONAL_KEY, "")?;
        Ok(self.unconditional.get_or_init(|| rep))
    }
}

/// Euclidean norm, accumulated in f64.
pub fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales `v` to unit length; zero or non-finite vectors are rejected.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

fn check_unit(v: &[f32]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// A text vector and an image vector in a shared space, both unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding {
    text_vector: Vec<f32>,
    image_vector: Vec<f32>,
}

impl JointEmbedding {
    pub fn new(text_vector: Vec<f32>, image_vector: Vec<f32>) -> Result<Self> {
        if text_vector.len() != image_vector.len() {
            return Err(Error::DimensionMismatch(text_vector.len(), image_vector.len()));
        }
        check_unit(&text_vector)?;
        check_unit(&image_vector)?;
        Ok(Self {
            text_vector,
            image_vector,
        })
    }

    pub fn text_vector(&self) -> &[f32] {
        &self.text_vector
    }

    pub fn image_vector(&self) -> &[f32] {
        &self.image_vector
    }
}

/// Cosine similarity of the pair, clamped to `[-1, 1]`.
pub fn similarity(pair: &JointEmbedding) -> f64 {
    dot(&pair.text_vector, &pair.image_vector).clamp(-1.0, 1.0)
}

/// `matrix[i][j]` is the similarity of text `i` with image `j`.
pub fn linkage_matrix(texts: &[Vec<f32>], images: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let dim = texts.first().or(images.first()).map_or(0, Vec::len);
    for v in texts.iter().chain(images) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(dim, v.len()));
        }
        check_unit(v)?;
    }
    Ok(texts
        .iter()
        .map(|t| images.iter().map(|im| dot(t, im).clamp(-1.0, 1.0)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_endpoints() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let same = JointEmbedding::new(e1.clone(), e1.clone()).unwrap();
        assert_eq!(similarity(&same), 1.0);
        let ortho = JointEmbedding::new(e1.clone(), e2).unwrap();
        assert_eq!(similarity(&ortho), 0.0);
        let v = normalize(&[0.3, -1.2, 2.0]).unwrap();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((similarity(&JointEmbedding::new(v.clone(), neg).unwrap()) + 1.0).abs() < 1e-6);
        assert!((similarity(&JointEmbedding::new(v.clone(), v).unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_unit_rejected() {
        assert!(matches!(
            JointEmbedding::new(vec![1.0, 1.0], vec![1.0, 0.0]),
            Err(Error::NotUnitNorm { .. })
        ));
        assert!(matches!(
            JointEmbedding::new(vec![1.0], vec![1.0, 0.0]),
            Err(Error::DimensionMismatch(1, 2))
        ));
        assert!(normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn linkage_identity_and_angle() {
        let basis = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(linkage_matrix(&basis, &basis).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t = vec![vec![1.0f32, 0.0]];
        let angle = std::f64::consts::PI / 3.0;
        let im = vec![vec![angle.cos() as f32, angle.sin() as f32]];
        let m = linkage_matrix(&t, &im).unwrap();
        assert!((m[0][0] - 0.5).abs() < 1e-6);
        assert!(matches!(
            linkage_matrix(&t, &[vec![1.0, 0.0, 0.0]]),
            Err(Error::DimensionMismatch(2, 3))
        ));
    }

    #[test]
    fn synthetic_entries_are_standardized() {
        let n = 200_000;
        let (mut sum, mut sq) = (0.0f64, 0.0f64);
        for k in 0..n {
            let v = f64::from(SyntheticEncoder::entry(0, (k / 768) as u32, k % 768));
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn representation_checks_shape_and_finiteness() {
        assert!(TextRepresentation::new(2, 2, vec![0.0; 3], EncoderSource::Synthetic).is_err());
        assert!(matches!(
            TextRepresentation::new(1, 2, vec![0.0, f32::INFINITY], EncoderSource::Synthetic),
            Err(Error::NonFinite(_))
        ));
    }
}
