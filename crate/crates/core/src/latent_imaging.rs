//! Cheap previews of latents.
//!
//! A [`LinearDecoder`] maps each latent pixel's channel vector to RGB with a
//! 3×C matrix plus bias, then maps the decode range onto bytes. Previews are
//! enlarged with [`upscale`], whose bilinear mode runs in 16.16 fixed point
//! so results are identical on every platform.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::LatentTensor;

const DEFAULT_DECODER: &str = include_str!("../assets/decoder/default.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDecoder {
    bias: [f64; 3],
    value_range: [f64; 2],
    weights: [Vec<f64>; 3],
}

impl LinearDecoder {
    pub fn new(weights: [Vec<f64>; 3], bias: [f64; 3], value_range: [f64; 2]) -> Result<Self> {
        let dec = Self {
            bias,
            value_range,
            weights,
        };
        dec.validate()?;
        Ok(dec)
    }

    fn validate(&self) -> Result<()> {
        let channels = self.weights[0].len();
        if channels == 0 || self.weights.iter().any(|row| row.len() != channels) {
            return Err(Error::InvalidParameter(
                "decoder weights must be 3 non-empty rows of equal length".into(),
            ));
        }
        let all = self.weights.iter().flatten().chain(&self.bias).chain(&self.value_range);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder parameters".into()));
        }
        let [lo, hi] = self.value_range;
        if lo >= hi {
            return Err(Error::InvalidParameter(format!("value range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }

    /// Latent→RGB factors for four-channel latents, range [-1, 1].
    pub fn default_rgb() -> Self {
        Self::from_json(DEFAULT_DECODER.as_bytes()).expect("shipped decoder config is valid")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let dec: Self = serde_json::from_slice(bytes)?;
        dec.validate()?;
        Ok(dec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("decoder serializes")
    }

    pub fn channels(&self) -> usize {
        self.weights[0].len()
    }

    pub fn weights(&self) -> &[Vec<f64>; 3] {
        &self.weights
    }

    pub fn bias(&self) -> [f64; 3] {
        self.bias
    }

    pub fn value_range(&self) -> [f64; 2] {
        self.value_range
    }

    /// `weights · latent[:, y, x] + bias` for every pixel, as
    /// `height × width × 3` values before the byte mapping.
    pub fn decode_pre_clamp(&self, latent: &LatentTensor) -> Result<Vec<f64>> {
        let shape = latent.shape();
        if shape.channels != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                found: shape.channels,
            });
        }
        let plane = shape.height * shape.width;
        let data = latent.data();
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for (row, bias) in self.weights.iter().zip(self.bias) {
                let v: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(c, w)| w * f64::from(data[c * plane + p]))
                    .sum();
                out.push(v + bias);
            }
        }
        Ok(out)
    }

    /// `round((v - lo) * 255 / (hi - lo))`, clamped to a byte. With the
    /// default range this is `round((v + 1) * 127.5)`, so 0 maps to 128.
    pub fn to_byte(&self, v: f64) -> u8 {
        let [lo, hi] = self.value_range;
        let scaled = ((v - lo) * (255.0 / (hi - lo))).round();
        if scaled.is_nan() {
            0
        } else {
            scaled.clamp(0.0, 255.0) as u8
        }
    }

    /// Inverse of [`LinearDecoder::to_byte`] ignoring rounding.
    pub fn from_byte(&self, b: f64) -> f64 {
        let [lo, hi] = self.value_range;
        lo + b * (hi - lo) / 255.0
    }
}

pub fn decode_linear(latent: &LatentTensor, dec: &LinearDecoder) -> Result<RgbImage> {
    let shape = latent.shape();
    let pixels = dec.decode_pre_clamp(latent)?.into_iter().map(|v| dec.to_byte(v)).collect();
    RgbImage::new(shape.width, shape.height, pixels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!("image size {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width, 3],
                found: vec![pixels.len()],
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.pixels)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
        Ok(out)
    }

    /// Decodes an 8-bit RGB or RGBA PNG; alpha is dropped.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let png_err = |e: png::DecodingError| Error::Png(e.to_string());
        let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(png_err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = info.line_size;
        let pixels = match info.color_type {
            png::ColorType::Rgb => (0..h).flat_map(|y| buf[y * stride..y * stride + w * 3].to_vec()).collect(),
            png::ColorType::Rgba => (0..h)
                .flat_map(|y| {
                    buf[y * stride..y * stride + w * 4]
                        .chunks_exact(4)
                        .flat_map(|p| [p[0], p[1], p[2]])
                        .collect::<Vec<_>>()
                })
                .collect(),
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        Self::new(w, h, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_png()?).map_err(|e| Error::file(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_png(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpscaleMode {
    Nearest,
    #[default]
    Bilinear,
}

const FIX_ONE: i64 = 1 << 16;

/// Source coordinate of target pixel `t` in 16.16 fixed point, using pixel
/// centres: `(t + 0.5) * src / dst - 0.5`, floored and clamped to the
/// source range.
fn fixed_source_pos(t: usize, src: usize, dst: usize) -> i64 {
    let (t, src, dst) = (t as i64, src as i64, dst as i64);
    let pos = ((2 * t + 1) * src * FIX_ONE - dst * FIX_ONE).div_euclid(2 * dst);
    pos.clamp(0, (src - 1) * FIX_ONE)
}

pub fn upscale(img: &RgbImage, target_w: usize, target_h: usize, mode: UpscaleMode) -> Result<RgbImage> {
    let (sw, sh) = (img.width, img.height);
    if target_w < sw || target_h < sh {
        return Err(Error::Downscale {
            source_w: sw,
            source_h: sh,
            target_w,
            target_h,
        });
    }
    let mut out = Vec::with_capacity(target_w * target_h * 3);
    match mode {
        UpscaleMode::Nearest => {
            for ty in 0..target_h {
                let sy = ty * sh / target_h;
                for tx in 0..target_w {
                    let sx = tx * sw / target_w;
                    out.extend_from_slice(&img.pixel(sx, sy));
                }
            }
        }
        UpscaleMode::Bilinear => {
            let xs: Vec<_> = (0..target_w)
                .map(|tx| {
                    let pos = fixed_source_pos(tx, sw, target_w);
                    let x0 = (pos >> 16) as usize;
                    (x0, (x0 + 1).min(sw - 1), pos & (FIX_ONE - 1))
                })
                .collect();
            for ty in 0..target_h {
                let pos = fixed_source_pos(ty, sh, target_h);
                let y0 = (pos >> 16) as usize;
                let y1 = (y0 + 1).min(sh - 1);
                let fy = pos & (FIX_ONE - 1);
                for &(x0, x1, fx) in &xs {
                    let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
                    let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
                    for ch in 0..3 {
                        let top = i64::from(p00[ch]) * (FIX_ONE - fx) + i64::from(p01[ch]) * fx;
                        let bot = i64::from(p10[ch]) * (FIX_ONE - fx) + i64::from(p11[ch]) * fx;
                        let v = (top * (FIX_ONE - fy) + bot * fy + (1 << 31)) >> 32;
                        out.push(v as u8);
                    }
                }
            }
        }
    }
    RgbImage::new(target_w, target_h, out)
}

/// Averages `factor × factor` blocks into `f64` channel means
/// (`height/factor × width/factor × 3`).
pub fn downsample_mean(img: &RgbImage, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::InvalidParameter(format!(
            "{}x{} image is not divisible into {factor}x{factor} blocks",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = (factor * factor) as f64;
    let mut out = vec![0.0; w * h * 3];
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let o = ((y / factor) * w + x / factor) * 3;
            for ch in 0..3 {
                out[o + ch] += f64::from(p[ch]);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(out)
}

/// Box downsample rounded back to bytes.
pub fn downsample(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    let means = downsample_mean(img, factor)?;
    RgbImage::new(
        img.width / factor,
        img.height / factor,
        means.into_iter().map(|v| v.round() as u8).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderFit {
    pub decoder: LinearDecoder,
    /// Mean absolute per-channel error in byte units over the training
    /// pixels, measured after rounding and clamping.
    pub train_mae: f64,
    pub samples: usize,
}

/// Fits weights and bias by least squares so that decoding each latent
/// reproduces its image box-downsampled to the latent's resolution.
pub fn fit_decoder(pairs: &[(LatentTensor, RgbImage)], value_range: [f64; 2]) -> Result<DecoderFit> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidParameter("decoder fit needs at least one pair".into()))?;
    let shape = first.0.shape();
    let (channels, plane) = (shape.channels, shape.height * shape.width);
    let mut design = Vec::new();
    let mut targets: [Vec<f64>; 3] = Default::default();
    let [lo, hi] = value_range;
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("value range [{lo}, {hi}] is empty")));
    }
    let mut byte_targets = Vec::new();
    for (latent, image) in pairs {
        if latent.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape.dims(),
                found: latent.shape().dims(),
            });
        }
        if image.width % shape.width != 0 || image.width / shape.width != image.height / shape.height {
            return Err(Error::ShapeMismatch {
                expected: vec![shape.height, shape.width],
                found: vec![image.height, image.width],
            });
        }
        let small = downsample_mean(image, image.width / shape.width)?;
        for p in 0..plane {
            for c in 0..channels {
                design.push(f64::from(latent.data()[c * plane + p]));
            }
            design.push(1.0);
            for ch in 0..3 {
                let b = small[p * 3 + ch];
                byte_targets.push(b);
                targets[ch].push(lo + b * (hi - lo) / 255.0);
            }
        }
    }
    let rows = design.len() / (channels + 1);
    let a = DMatrix::from_row_slice(rows, channels + 1, &design);
    let svd = a.svd(true, true);
    let mut weights: [Vec<f64>; 3] = Default::default();
    let mut bias = [0.0; 3];
    for ch in 0..3 {
        let x = svd
            .solve(&DVector::from_vec(targets[ch].clone()), 1e-12)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        weights[ch] = x.iter().take(channels).copied().collect();
        bias[ch] = x[channels];
    }
    let decoder = LinearDecoder::new(weights, bias, value_range)?;
    let mut abs = 0.0;
    let mut n = 0usize;
    for (i, (latent, _)) in pairs.iter().enumerate() {
        let decoded = decoder.decode_pre_clamp(latent)?;
        for (j, v) in decoded.into_iter().enumerate() {
            abs += (f64::from(decoder.to_byte(v)) - byte_targets[i * plane * 3 + j]).abs();
            n += 1;
        }
    }
    Ok(DecoderFit {
        decoder,
        train_mae: abs / n as f64,
        samples: pairs.len(),
    })
}

/// Decode then upscale to `width` pixels wide, keeping the latent's aspect.
pub fn thumbnail(latent: &LatentTensor, dec: &LinearDecoder, width: usize, mode: UpscaleMode) -> Result<RgbImage> {
    let small = decode_linear(latent, dec)?;
    let height = width * small.height / small.width;
    upscale(&small, width, height, mode)
}
