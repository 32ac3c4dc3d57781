//! Differentiable structural similarity on luma.
//!
//! Local statistics come from an 11x11 Gaussian window applied in valid
//! mode (no padding); the result is the mean local similarity, a scalar
//! in (-1, 1] that stays differentiable w.r.t. both inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs (unit-range images: 1.0).
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::InvalidArgument("ssim: K1 and K2 must be positive".into()));
        }
        if self.window_size == 0 || self.sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::InvalidArgument("ssim: bad window configuration".into()));
        }
        Ok(())
    }

    /// Normalized 2-D Gaussian window, flat row-major, summing to 1.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_size;
        let center = (n as f64 - 1.0) / 2.0;
        let s2 = 2.0 * self.sigma * self.sigma;
        let mut w = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let dy = y as f64 - center;
                let dx = x as f64 - center;
                w.push((-(dy * dy + dx * dx) / s2).exp());
            }
        }
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }
}

/// Mean SSIM between two [B,3,H,W] image tensors, differentiable w.r.t.
/// both. Inputs are expected in [0,1]; dimensions must cover the window.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rank() != 4 || a.shape()[1] != 3 {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: a.shape().to_vec(),
            msg: "expected [B,3,H,W]".into(),
        });
    }
    let (h, w) = (a.shape()[2], a.shape()[3]);
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: a.shape().to_vec(),
            msg: format!("image smaller than the {0}x{0} window", cfg.window_size),
        });
    }

    // constant (no-grad) kernels
    let luma_w = Tensor::from_vec(
        LUMA_WEIGHTS.iter().map(|&v| T::from_f64(v)).collect(),
        &[1, 3, 1, 1],
    )?;
    let win = Tensor::from_vec(
        cfg.window().iter().map(|&v| T::from_f64(v)).collect(),
        &[1, 1, cfg.window_size, cfg.window_size],
    )?;

    let ya = a.conv2d(&luma_w, None, 1, 0)?;
    let yb = b.conv2d(&luma_w, None, 1, 0)?;

    let mu_a = ya.conv2d(&win, None, 1, 0)?;
    let mu_b = yb.conv2d(&win, None, 1, 0)?;
    let mu_aa = mu_a.mul(&mu_a)?;
    let mu_bb = mu_b.mul(&mu_b)?;
    let mu_ab = mu_a.mul(&mu_b)?;

    let sigma_aa = ya.mul(&ya)?.conv2d(&win, None, 1, 0)?.sub(&mu_aa)?;
    let sigma_bb = yb.mul(&yb)?.conv2d(&win, None, 1, 0)?.sub(&mu_bb)?;
    let sigma_ab = ya.mul(&yb)?.conv2d(&win, None, 1, 0)?.sub(&mu_ab)?;

    let c1 = T::from_f64((cfg.k1 * cfg.dynamic_range).powi(2));
    let c2 = T::from_f64((cfg.k2 * cfg.dynamic_range).powi(2));
    let two = T::from_f64(2.0);

    let num = mu_ab
        .scale(two)?
        .add_scalar(c1)?
        .mul(&sigma_ab.scale(two)?.add_scalar(c2)?)?;
    let den = mu_aa
        .add(&mu_bb)?
        .add_scalar(c1)?
        .mul(&sigma_aa.add(&sigma_bb)?.add_scalar(c2)?)?;
    num.div(&den)?.mean_all()
}
