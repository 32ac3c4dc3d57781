//! Synthetic degradations standing in for SR reconstruction artifacts:
//! resample softness, blur, sensor-style noise, and level quantization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bicubic_resize, Image};
use crate::error::{Error, Result};

pub const MAX_BLUR_SIGMA: f32 = 3.0;
pub const MAX_NOISE_SIGMA: f32 = 0.1;
pub const MIN_QUANT_LEVELS: u32 = 8;
pub const MAX_QUANT_LEVELS: u32 = 256;
pub const MAX_DOWN_UP_FACTOR: u32 = 4;

/// One degradation configuration. Applied in a fixed order:
/// down/up resample, Gaussian blur, additive Gaussian noise, quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    /// Gaussian blur sigma in pixels, 0 disables. Range [0, 3].
    pub blur_sigma: f32,
    /// Additive noise sigma on the unit range, 0 disables. Range [0, 0.1].
    pub noise_sigma: f32,
    /// Quantization levels in {8..256}; 256 keeps the full 8-bit
    /// resolution and is a no-op (file encoding already quantizes there).
    pub quant_levels: u32,
    /// Downscale-then-upscale factor >= 1; 1 disables.
    pub down_up_factor: u32,
    /// Seed for the noise draw; stored so a dataset row reproduces.
    pub seed: u64,
}

impl DegradationRecipe {
    /// Recipe that returns the input bitwise.
    pub fn identity(seed: u64) -> Self {
        DegradationRecipe {
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            quant_levels: MAX_QUANT_LEVELS,
            down_up_factor: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_BLUR_SIGMA).contains(&self.blur_sigma) {
            return Err(Error::InvalidArgument(format!(
                "blur_sigma {} outside [0, {}]",
                self.blur_sigma, MAX_BLUR_SIGMA
            )));
        }
        if !(0.0..=MAX_NOISE_SIGMA).contains(&self.noise_sigma) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma {} outside [0, {}]",
                self.noise_sigma, MAX_NOISE_SIGMA
            )));
        }
        if !(MIN_QUANT_LEVELS..=MAX_QUANT_LEVELS).contains(&self.quant_levels) {
            return Err(Error::InvalidArgument(format!(
                "quant_levels {} outside {{{}..{}}}",
                self.quant_levels, MIN_QUANT_LEVELS, MAX_QUANT_LEVELS
            )));
        }
        if !(1..=MAX_DOWN_UP_FACTOR).contains(&self.down_up_factor) {
            return Err(Error::InvalidArgument(format!(
                "down_up_factor {} outside {{1..{}}}",
                self.down_up_factor, MAX_DOWN_UP_FACTOR
            )));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.blur_sigma == 0.0
            && self.noise_sigma == 0.0
            && self.quant_levels == MAX_QUANT_LEVELS
            && self.down_up_factor == 1
    }
}

/// Separable Gaussian blur with edge clamping; radius = ceil(3 sigma).
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / s2).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    let (h, w) = (img.height(), img.width());
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    // horizontal then vertical, accumulating in f64
    let mut mid = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + i as isize - radius, w);
                    acc += k * img.get(c, y, sx) as f64;
                }
                mid[(c * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = Image::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + i as isize - radius, h);
                    acc += k * mid[(c * h + sy) * w + x];
                }
                out.set(c, y, x, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Apply `recipe` deterministically under `seed`. The identity recipe
/// returns the input bitwise.
pub fn degrade(img: &Image, recipe: &DegradationRecipe, seed: u64) -> Result<Image> {
    recipe.validate()?;
    if recipe.is_identity() {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    if recipe.down_up_factor > 1 {
        let f = recipe.down_up_factor as usize;
        let small_h = (img.height() / f).max(1);
        let small_w = (img.width() / f).max(1);
        let small = bicubic_resize(&out, small_h, small_w)?;
        out = bicubic_resize(&small, img.height(), img.width())?;
    }
    if recipe.blur_sigma > 0.0 {
        out = gaussian_blur(&out, recipe.blur_sigma);
    }
    if recipe.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, recipe.noise_sigma as f64)
            .map_err(|e| Error::InvalidArgument(format!("noise sigma: {}", e)))?;
        for v in out.data_mut() {
            let n = normal.sample(&mut rng);
            *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
        }
    }
    if recipe.quant_levels < MAX_QUANT_LEVELS {
        let levels = (recipe.quant_levels - 1) as f32;
        for v in out.data_mut() {
            *v = (*v * levels).round() / levels;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free(v: f32) -> Image {
        Image::from_planes(64, 64, vec![v; 3 * 64 * 64]).unwrap()
    }

    #[test]
    fn identity_recipe_returns_input_bitwise() {
        let mut img = noise_free(0.123);
        img.set(2, 10, 20, 0.9);
        let out = degrade(&img, &DegradationRecipe::identity(1), 1).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn noise_sigma_shows_up_in_pixel_statistics() {
        let img = noise_free(0.5);
        let recipe = DegradationRecipe {
            noise_sigma: 0.05,
            ..DegradationRecipe::identity(3)
        };
        let out = degrade(&img, &recipe, 3).unwrap();
        let n = out.data().len() as f64;
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = out
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((0.045..=0.055).contains(&std), "std {}", std);
    }

    #[test]
    fn quantization_to_8_levels_closed_form() {
        let img = noise_free(0.5);
        let recipe = DegradationRecipe {
            quant_levels: 8,
            ..DegradationRecipe::identity(0)
        };
        let out = degrade(&img, &recipe, 0).unwrap();
        // round(0.5 * 7)/7 = 4/7
        assert_eq!(out.get(0, 0, 0), 4.0 / 7.0);
    }

    #[test]
    fn degrade_is_reproducible_bitwise() {
        let img = noise_free(0.4);
        let recipe = DegradationRecipe {
            blur_sigma: 1.0,
            noise_sigma: 0.03,
            quant_levels: 32,
            down_up_factor: 2,
            seed: 9,
        };
        let a = degrade(&img, &recipe, 9).unwrap();
        let b = degrade(&img, &recipe, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        let img = noise_free(0.4);
        for recipe in [
            DegradationRecipe { blur_sigma: 3.5, ..DegradationRecipe::identity(0) },
            DegradationRecipe { noise_sigma: 0.2, ..DegradationRecipe::identity(0) },
            DegradationRecipe { quant_levels: 4, ..DegradationRecipe::identity(0) },
            DegradationRecipe { down_up_factor: 9, ..DegradationRecipe::identity(0) },
        ] {
            assert!(degrade(&img, &recipe, 0).is_err());
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = noise_free(0.7);
        let out = gaussian_blur(&img, 2.0);
        for &v in out.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
    }
}
