//! Image preprocessing: median denoising, per-image colour standardization,
//! bilinear resizing and dihedral (D4) augmentation.
//!
//! The pipeline order is fixed: denoise → normalize_color → resize →
//! augment, and augmentation only runs in [`Mode::Train`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{seed, Image};
use remission_nn::Tensor;

/// Input sizes evaluated in the reference ablation.
pub const STUDY_SIZES: [usize; 3] = [224, 299, 512];

/// Clamp bound for standardized values, in standard deviations.
pub const CLAMP_SIGMA: f32 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("target size {0} is not one of {STUDY_SIZES:?}; set `custom_size = true` to allow it")]
    UnsupportedSize(usize),
    #[error("image shape {0:?} is not [H, W, 3] with H, W >= 8")]
    BadShape(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Permit a `target_size` outside [`STUDY_SIZES`].
    pub custom_size: bool,
    pub color_normalize: bool,
    pub augment: bool,
    pub denoise: bool,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 224, custom_size: false, color_normalize: true, augment: true, denoise: true, seed: 0 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.target_size < 8 || (!self.custom_size && !STUDY_SIZES.contains(&self.target_size)) {
            return Err(PreprocessError::UnsupportedSize(self.target_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims(img: &Image) -> (usize, usize) {
    let s = img.shape();
    assert!(s.len() == 3 && s[2] == 3, "expected [H, W, 3], got {s:?}");
    (s[0], s[1])
}

/// Result of [`normalize_color`]. Channels with zero variance come back as
/// zeros and are listed in `degenerate`.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub image: Image,
    pub degenerate: Vec<usize>,
}

impl Normalized {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate.is_empty()
    }
}

/// Per-image, per-channel standardization to zero mean and unit variance,
/// clamped to ±[`CLAMP_SIGMA`].
pub fn normalize_color(img: &Image) -> Normalized {
    let (h, w) = dims(img);
    let n = (h * w) as f64;
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    let mut degenerate = Vec::new();
    for c in 0..3 {
        let mean = d.iter().skip(c).step_by(3).map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = d.iter().skip(c).step_by(3).map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        if var <= 1e-12 {
            degenerate.push(c);
            continue;
        }
        let inv = 1.0 / var.sqrt();
        for i in (c..d.len()).step_by(3) {
            out[i] = (((f64::from(d[i]) - mean) * inv) as f32).clamp(-CLAMP_SIGMA, CLAMP_SIGMA);
        }
    }
    if !degenerate.is_empty() {
        log::warn!("degenerate image: zero variance in channel(s) {degenerate:?}");
    }
    Normalized { image: Tensor::from_vec(img.shape().to_vec(), out).expect("same shape"), degenerate }
}

/// One element of the dihedral group of the square: rotate by
/// `quarter_turns * 90°` counter-clockwise after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct D4 {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl D4 {
    pub const IDENTITY: D4 = D4 { quarter_turns: 0, flip: false };

    pub fn all() -> [D4; 8] {
        std::array::from_fn(|i| D4 { quarter_turns: (i % 4) as u8, flip: i >= 4 })
    }

    pub fn index(self) -> usize {
        self.quarter_turns as usize + if self.flip { 4 } else { 0 }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> D4 {
        Self::all()[rng.random_range(0..8)]
    }

    /// Source pixel for output pixel `(y, x)` in an `n x n` square.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        // inverse rotation, then inverse flip
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.quarter_turns {
            // undo one CCW turn: out(y, x) = in(x, n-1-y)
            let (ny, nx) = (sx, n - 1 - sy);
            sy = ny;
            sx = nx;
        }
        if self.flip {
            sx = n - 1 - sx;
        }
        (sy, sx)
    }

    pub fn apply(self, img: &Image) -> Image {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        assert_eq!(h, w, "D4 transforms need a square image");
        let c = img.shape()[2];
        let d = img.data();
        let mut out = vec![0.0f32; d.len()];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h);
                out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&d[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
            }
        }
        Tensor::from_vec(img.shape().to_vec(), out).expect("same shape")
    }
}

/// Apply a uniformly sampled D4 element; returns the image and the element.
pub fn augment(img: &Image, seed: u64) -> (Image, D4) {
    let t = D4::sample(&mut seed::rng_for(seed, "augment"));
    (t.apply(img), t)
}

/// 3x3 median filter per channel with edge replication.
pub fn denoise(img: &Image) -> Image {
    let (h, w) = dims(img);
    let d = img.data();
    let mut out = vec![0.0f32; d.len()];
    let mut win = [0.0f32; 9];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut k = 0;
                for dy in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        win[k] = d[(yy * w + xx) * 3 + c];
                        k += 1;
                    }
                }
                win.sort_unstable_by(f32::total_cmp);
                out[(y * w + x) * 3 + c] = win[4];
            }
        }
    }
    Tensor::from_vec(img.shape().to_vec(), out).expect("same shape")
}

/// Bilinear resize to `size x size` with half-pixel centres and edge clamping.
pub fn resize(img: &Image, size: usize) -> Image {
    let (h, w) = dims(img);
    if h == size && w == size {
        return img.clone();
    }
    let d = img.data();
    let axis = |out_i: usize, in_n: usize| -> (usize, usize, f32) {
        let scale = in_n as f64 / size as f64;
        let src = ((out_i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_n - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let cols: Vec<_> = (0..size).map(|x| axis(x, w)).collect();
    let mut out = vec![0.0f32; size * size * 3];
    for y in 0..size {
        let (y0, y1, fy) = axis(y, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let p = |yy: usize, xx: usize| d[(yy * w + xx) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * size + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec([size, size, 3], out).expect("size matches")
}

/// The configured preprocessing chain.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PreprocessConfig,
}

impl Pipeline {
    pub fn new(config: PreprocessConfig) -> Result<Self, PreprocessError> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Deterministic part of the chain (everything except augmentation).
    pub fn prepare(&self, img: &Image) -> Result<Image, PreprocessError> {
        let s = img.shape();
        if s.len() != 3 || s[2] != 3 || s[0] < 8 || s[1] < 8 {
            return Err(PreprocessError::BadShape(s.to_vec()));
        }
        let mut x = if self.config.denoise { denoise(img) } else { img.clone() };
        if self.config.color_normalize {
            x = normalize_color(&x).image;
        }
        Ok(resize(&x, self.config.target_size))
    }

    /// Full chain. `sample_seed` keys the augmentation draw and is ignored
    /// outside training.
    pub fn apply(&self, img: &Image, mode: Mode, sample_seed: u64) -> Result<Image, PreprocessError> {
        let x = self.prepare(img)?;
        Ok(self.augment_if_training(x, mode, sample_seed))
    }

    pub fn augment_if_training(&self, img: Image, mode: Mode, sample_seed: u64) -> Image {
        match mode {
            Mode::Train if self.config.augment => augment(&img, seed::derive(self.config.seed, &sample_seed.to_string())).0,
            _ => img,
        }
    }
}
