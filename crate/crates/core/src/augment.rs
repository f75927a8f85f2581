//! Saliency-driven input augmentations.
//!
//! Given an image `x` and a saliency map `s` with weights in `[0, 1]`, four
//! views are produced per sample:
//!
//! | field           | construction                         |
//! |-----------------|--------------------------------------|
//! | `x`             | the original                         |
//! | `x_tilde`       | blur everywhere except salient areas |
//! | `x_prime`       | blur everywhere                      |
//! | `x_tilde_prime` | blur only salient areas              |
//!
//! Partial saliency interpolates pixelwise between the original and the fully
//! degraded image: `s * x + (1 - s) * degrade(x)`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` unit-interval pixels, stored row-major with
/// channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image", "dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("image", format!("{channels} channels (need 1 or 3)")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!("{} pixels for {height}x{width}x{channels}", pixels.len()),
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid("image", format!("pixel {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Planar `channels x height x width` copy, the layout convolution layers consume.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (k, px) in self.pixels.chunks_exact(self.channels).enumerate() {
            for (c, v) in px.iter().enumerate() {
                out[c * plane + k] = *v;
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let buf = img.to_luma8();
            let (w, h) = buf.dimensions();
            let px = buf.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
            Self::new(h as usize, w as usize, 1, px)
        } else {
            let buf = img.to_rgb8();
            let (w, h) = buf.dimensions();
            let px = buf.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
            Self::new(h as usize, w as usize, 3, px)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_u8(v)).collect();
        let res = if self.channels == 1 {
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
                .map(|b: GrayImage| b.save(path))
                .expect("buffer size matches")
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
                .map(|b: RgbImage| b.save(path))
                .expect("buffer size matches")
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel importance weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || weights.len() != height * width {
            return Err(Error::invalid(
                "saliency",
                format!("{} weights for {height}x{width}", weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::invalid("saliency", format!("weight {w} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            weights,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.width + x]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let buf = img.to_luma8();
        let (w, h) = buf.dimensions();
        let weights = buf.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
        Self::new(h as usize, w as usize, weights)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.weights.iter().map(|&v| to_u8(v)).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches")
            .save(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurSpec {
    /// `(rows, cols)`; both odd.
    pub kernel_size: (usize, usize),
    pub sigma: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            kernel_size: (7, 7),
            sigma: 10.0,
        }
    }
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.kernel_size;
        if r % 2 == 0 || c % 2 == 0 {
            return Err(Error::invalid(
                "kernel_size",
                format!("({r}, {c}): both dimensions must be odd"),
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("sigma", format!("{} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized 2-D Gaussian weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.weights[r * self.cols + c]
    }
}

pub fn gaussian_kernel(spec: &BlurSpec) -> Result<GaussianKernel> {
    spec.validate()?;
    let (rows, cols) = spec.kernel_size;
    let (cr, cc) = ((rows / 2) as f64, (cols / 2) as f64);
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut weights = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = (r as f64 - cr, c as f64 - cc);
            weights.push((-(u * u + v * v) / denom).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(GaussianKernel {
        rows,
        cols,
        weights,
    })
}

/// Gaussian blur of every channel with zero-padded borders, clamped to `[0, 1]`.
pub fn full_blur(x: &Image, spec: &BlurSpec) -> Result<Image> {
    let k = gaussian_kernel(spec)?;
    let (h, w, ch) = (x.height, x.width, x.channels);
    let (hr, hc) = ((k.rows / 2) as isize, (k.cols / 2) as isize);
    let mut out = vec![0.0; x.pixels.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for kr in 0..k.rows {
                    let sy = y as isize + kr as isize - hr;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kc in 0..k.cols {
                        let sx = xx as isize + kc as isize - hc;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += k.at(kr, kc) * x.get(sy as usize, sx as usize, c);
                    }
                }
                out[(y * w + xx) * ch + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, ch, out)
}

pub fn invert_saliency(s: &SaliencyMap) -> SaliencyMap {
    SaliencyMap {
        height: s.height,
        width: s.width,
        weights: s.weights.iter().map(|w| 1.0 - w).collect(),
    }
}

/// Keep the image where saliency is 1, fully blur it where saliency is 0.
pub fn selective_blur(x: &Image, s: &SaliencyMap, spec: &BlurSpec) -> Result<Image> {
    check_pair(x, s)?;
    let blurred = full_blur(x, spec)?;
    blend(x, &blurred, s)
}

fn check_pair(x: &Image, s: &SaliencyMap) -> Result<()> {
    if x.height != s.height || x.width != s.width {
        return Err(Error::ShapeMismatch {
            op: "saliency blend",
            left: vec![x.height, x.width],
            right: vec![s.height, s.width],
        });
    }
    Ok(())
}

/// `s * x + (1 - s) * degraded`, pixelwise and per channel.
fn blend(x: &Image, degraded: &Image, s: &SaliencyMap) -> Result<Image> {
    let ch = x.channels;
    let pixels = x
        .pixels
        .iter()
        .zip(&degraded.pixels)
        .enumerate()
        .map(|(k, (&orig, &deg))| {
            let w = s.weights[k / ch];
            (w * orig + (1.0 - w) * deg).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(x.height, x.width, ch, pixels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedQuad {
    pub x: Image,
    pub x_tilde: Image,
    pub x_prime: Image,
    pub x_tilde_prime: Image,
}

impl AugmentedQuad {
    pub fn views(&self) -> [&Image; 4] {
        [&self.x, &self.x_tilde, &self.x_prime, &self.x_tilde_prime]
    }
}

pub fn make_quad(x: &Image, s: &SaliencyMap, spec: &BlurSpec) -> Result<AugmentedQuad> {
    make_quad_with(x, s, &Degradation::Blur(*spec))
}

/// Quad construction with an arbitrary degradation in place of blur.
pub fn make_quad_with(x: &Image, s: &SaliencyMap, degradation: &Degradation) -> Result<AugmentedQuad> {
    check_pair(x, s)?;
    let degraded = degradation.apply(x)?;
    Ok(AugmentedQuad {
        x: x.clone(),
        x_tilde: blend(x, &degraded, s)?,
        x_tilde_prime: blend(x, &degraded, &invert_saliency(s))?,
        x_prime: degraded,
    })
}

/// How non-salient signal is removed. Blur is the default; noise and dimming
/// share the same saliency-weighted blend.
#[derive(Clone, Debug, PartialEq)]
pub enum Degradation {
    Blur(BlurSpec),
    /// Additive Gaussian noise, seeded per call so the output is reproducible.
    Noise { std: f64, seed: u64 },
    /// Multiply intensities by `factor` in `[0, 1]`.
    Dim { factor: f64 },
}

impl Degradation {
    pub fn apply(&self, x: &Image) -> Result<Image> {
        match self {
            Degradation::Blur(spec) => full_blur(x, spec),
            Degradation::Noise { std, seed } => {
                let normal = Normal::new(0.0, *std)
                    .map_err(|e| Error::invalid("noise std", e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let px = x
                    .pixels
                    .iter()
                    .map(|p| (p + normal.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                Image::new(x.height, x.width, x.channels, px)
            }
            Degradation::Dim { factor } => {
                if !(0.0..=1.0).contains(factor) {
                    return Err(Error::invalid("dim factor", format!("{factor} outside [0, 1]")));
                }
                let px = x.pixels.iter().map(|p| p * factor).collect();
                Image::new(x.height, x.width, x.channels, px)
            }
        }
    }
}

/// Selective version of any [`Degradation`].
pub fn selective_degrade(x: &Image, s: &SaliencyMap, degradation: &Degradation) -> Result<Image> {
    check_pair(x, s)?;
    blend(x, &degradation.apply(x)?, s)
}
