//! Tile → model tensor: bilinear resize, Reinhard stain normalization,
//! z-score normalization, and training-time augmentation.

pub mod color;

use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::wsi_io::Tile;
use color::{hsv_to_rgb, rgb_to_hsv, LabTransform};

pub const MODEL_INPUT_SIDE: u32 = 224;
/// Standard deviations at or below this mark a degenerate channel.
pub const STD_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("resize side must be at least 1")]
    InvalidSide,
    #[error("degenerate statistics: channel {channel} has std {std}")]
    DegenerateStats { channel: usize, std: f64 },
    #[error("expected {expected:?} statistics, got {got:?}")]
    WrongSpace { expected: ColorSpace, got: ColorSpace },
    #[error("empty image")]
    EmptyImage,
    #[error("rotation must be a multiple of 90 degrees, got {0}")]
    BadRotation(u32),
    #[error("augmentation bounds must be finite and non-negative")]
    BadAugmentBounds,
    #[error("channel stats {path}: {reason}")]
    StatsFile { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Lab,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub space: ColorSpace,
}

impl ChannelStats {
    /// ImageNet channel statistics for RGB scaled to [0,1].
    pub fn imagenet() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225], space: ColorSpace::Rgb }
    }

    pub fn require(&self, space: ColorSpace) -> Result<(), PreprocessError> {
        if self.space != space {
            return Err(PreprocessError::WrongSpace { expected: space, got: self.space });
        }
        for (channel, &std) in self.std.iter().enumerate() {
            if !std.is_finite() || std <= STD_EPSILON {
                return Err(PreprocessError::DegenerateStats { channel, std });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let err = |reason: String| PreprocessError::StatsFile { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

/// Model input: `side × side × 3`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct TileTensor {
    pub side: u32,
    pub values: Vec<f32>,
}

impl TileTensor {
    /// Channel-major copy (`3 × side × side`).
    pub fn to_chw(&self) -> Vec<f32> {
        let n = (self.side * self.side) as usize;
        let mut out = vec![0.0; n * 3];
        for (i, px) in self.values.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        out
    }
}

pub fn tile_image(tile: &Tile) -> RgbImage {
    RgbImage::from_raw(tile.tile_size, tile.tile_size, tile.pixels.clone()).expect("tile buffer matches its size")
}

/// Bilinear resize with half-pixel centers: output pixel `i` samples the
/// source at `(i + 0.5)·scale − 0.5`, clamped to the edge. Results are
/// rounded half up.
pub fn resize(img: &RgbImage, side: u32) -> Result<RgbImage, PreprocessError> {
    if side == 0 {
        return Err(PreprocessError::InvalidSide);
    }
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    if (w, h) == (side, side) {
        return Ok(img.clone());
    }
    let taps = |n: u32| -> Vec<(u32, u32, f32)> {
        let scale = n as f32 / side as f32;
        (0..side)
            .map(|i| {
                let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
                let i0 = s.floor() as u32;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let xs = taps(w);
    let ys = taps(h);
    let src = img.as_raw();
    let at = |x: u32, y: u32, c: usize| src[(y as usize * w as usize + x as usize) * 3 + c] as f32;
    let mut out = RgbImage::new(side, side);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let top = at(x0, y0, c) * (1.0 - fx) + at(x1, y0, c) * fx;
                let bot = at(x0, y1, c) * (1.0 - fx) + at(x1, y1, c) * fx;
                *p = (top * (1.0 - fy) + bot * fy + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox as u32, oy as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

/// Resizes the full tile buffer, padding included.
pub fn resize_tile(tile: &Tile, side: u32) -> Result<RgbImage, PreprocessError> {
    resize(&tile_image(tile), side)
}

fn rgb_f64(img: &RgbImage) -> impl Iterator<Item = [f64; 3]> + '_ {
    img.pixels().map(|p| p.0.map(f64::from))
}

/// Mean and population standard deviation of `pixels` mapped into lαβ.
pub fn lab_stats_of(pixels: impl IntoIterator<Item = [f64; 3]>) -> Result<ChannelStats, PreprocessError> {
    let t = LabTransform::default();
    let lab: Vec<[f64; 3]> = pixels.into_iter().map(|p| t.rgb_to_lab(p)).collect();
    if lab.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let n = lab.len() as f64;
    // Shifted by the first pixel so flat images give exactly zero spread.
    let origin = lab[0];
    let mut mean = [0.0; 3];
    for v in &lab {
        for c in 0..3 {
            mean[c] += v[c] - origin[c];
        }
    }
    let mean: [f64; 3] = std::array::from_fn(|c| origin[c] + mean[c] / n);
    let mut var = [0.0; 3];
    for v in &lab {
        for c in 0..3 {
            var[c] += (v[c] - mean[c]).powi(2);
        }
    }
    Ok(ChannelStats { mean, std: var.map(|s| (s / n).sqrt()), space: ColorSpace::Lab })
}

pub fn lab_stats(img: &RgbImage) -> Result<ChannelStats, PreprocessError> {
    lab_stats_of(rgb_f64(img))
}

/// Reinhard transfer before quantization: RGB on the 0–255 scale, unclamped.
pub fn reinhard_normalize_f64(img: &RgbImage, target: &ChannelStats) -> Result<Vec<[f64; 3]>, PreprocessError> {
    target.require(ColorSpace::Lab)?;
    let src = lab_stats(img)?;
    let scale: [f64; 3] =
        std::array::from_fn(|c| if src.std[c] <= STD_EPSILON { 1.0 } else { target.std[c] / src.std[c] });
    let t = LabTransform::default();
    Ok(rgb_f64(img)
        .map(|p| {
            let lab = t.rgb_to_lab(p);
            t.lab_to_rgb(std::array::from_fn(|c| (lab[c] - src.mean[c]) * scale[c] + target.mean[c]))
        })
        .collect())
}

pub fn reinhard_normalize(img: &RgbImage, target: &ChannelStats) -> Result<RgbImage, PreprocessError> {
    let px = reinhard_normalize_f64(img, target)?;
    let raw = px.iter().flat_map(|p| p.map(|v| (v + 0.5).floor().clamp(0.0, 255.0) as u8)).collect();
    Ok(RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions"))
}

/// Scales to [0,1] and standardizes per channel.
pub fn zscore(img: &RgbImage, stats: &ChannelStats) -> Result<TileTensor, PreprocessError> {
    stats.require(ColorSpace::Rgb)?;
    let (w, h) = img.dimensions();
    if w != h {
        return Err(PreprocessError::InvalidSide);
    }
    let values = img
        .as_raw()
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| ((p[c] as f64 / 255.0 - stats.mean[c]) / stats.std[c]) as f32))
        .collect();
    Ok(TileTensor { side: w, values })
}

/// Inference preprocessing: resize → optional Reinhard → z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub side: u32,
    pub reinhard_target: Option<ChannelStats>,
    pub zscore: ChannelStats,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self { side: MODEL_INPUT_SIDE, reinhard_target: None, zscore: ChannelStats::imagenet() }
    }
}

impl Preprocessor {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.side == 0 {
            return Err(PreprocessError::InvalidSide);
        }
        if let Some(t) = &self.reinhard_target {
            t.require(ColorSpace::Lab)?;
        }
        self.zscore.require(ColorSpace::Rgb)
    }

    pub fn apply(&self, tile: &Tile) -> Result<TileTensor, PreprocessError> {
        let mut img = resize_tile(tile, self.side)?;
        if let Some(target) = &self.reinhard_target {
            img = reinhard_normalize(&img, target)?;
        }
        zscore(&img, &self.zscore)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Clockwise, one of 0/90/180/270.
    pub rotation: u32,
    /// Saturation shift is drawn from `[-s, s]`.
    pub max_saturation_delta: f64,
    /// Hue shift in degrees is drawn from `[-h, h]`.
    pub max_hue_delta: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { flip_h: false, flip_v: false, rotation: 0, max_saturation_delta: 0.2, max_hue_delta: 10.0 }
    }
}

impl AugmentSpec {
    /// Geometry only; colors are left untouched.
    pub fn geometric(flip_h: bool, flip_v: bool, rotation: u32) -> Self {
        Self { flip_h, flip_v, rotation, max_saturation_delta: 0.0, max_hue_delta: 0.0 }
    }

    /// Random flips and rotation with the default color bounds.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.random(),
            flip_v: rng.random(),
            rotation: 90 * rng.random_range(0..4u32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !self.rotation.is_multiple_of(90) || self.rotation >= 360 {
            return Err(PreprocessError::BadRotation(self.rotation));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.max_saturation_delta) || !ok(self.max_hue_delta) {
            return Err(PreprocessError::BadAugmentBounds);
        }
        Ok(())
    }
}

/// Flips, then rotates, then shifts saturation and hue in HSV by amounts
/// drawn from a ChaCha8 stream seeded with `seed`.
pub fn augment(img: &RgbImage, spec: &AugmentSpec, seed: u64) -> Result<RgbImage, PreprocessError> {
    use image::imageops;
    spec.validate()?;
    let mut out = img.clone();
    if spec.flip_h {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if spec.flip_v {
        imageops::flip_vertical_in_place(&mut out);
    }
    out = match spec.rotation {
        90 => imageops::rotate90(&out),
        180 => imageops::rotate180(&out),
        270 => imageops::rotate270(&out),
        _ => out,
    };
    if spec.max_saturation_delta == 0.0 && spec.max_hue_delta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = rng.random_range(-spec.max_saturation_delta..=spec.max_saturation_delta);
    let dh = rng.random_range(-spec.max_hue_delta..=spec.max_hue_delta);
    for p in out.pixels_mut() {
        let [h, s, v] = rgb_to_hsv(p.0.map(|c| c as f64 / 255.0));
        let rgb = hsv_to_rgb([h + dh, (s + ds).clamp(0.0, 1.0), v]);
        p.0 = rgb.map(|c| (c * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}
