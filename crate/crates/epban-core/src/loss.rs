//! Quality-regression loss and the normalized distortion + perceptual
//! mixture used for closed-loop SR optimization.
//!
//! The mixture is (alpha*L_D + beta*L_P) / (|L_D + L_P| + eps) with the
//! denominator treated as a per-step frozen scalar. Written literally,
//! the normalized mixture collapses to a constant whenever alpha == beta
//! (both fractions share one denominator), so a diagnostic mode exposes
//! exactly that algebraic cancellation; see [`DenominatorMode`].

use crate::error::{Error, Result};
use crate::net::{PbanModel, RunMode};
use crate::scalar::Scalar;
use crate::ssim::{ssim, SsimConfig};
use crate::tensor::Tensor;

/// Floor added to the frozen denominator.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the distortion term -ssim.
    pub alpha: f64,
    /// Weight of the perceptual term -q_hat.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be nonnegative with alpha + beta > 0, got ({}, {})",
                alpha, beta
            )));
        }
        Ok(LossWeights { alpha, beta })
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.beta, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenominatorMode {
    /// Default: denominator |L_D + L_P| + eps frozen out of the graph.
    StopGrad,
    /// The mixture exactly as written, denominator inside the graph with
    /// no guard. With alpha == beta the loss is constant and its gradient
    /// cancels to rounding noise; kept as a diagnostic.
    Literal,
}

#[derive(Debug)]
pub struct CombinedLoss<T: Scalar> {
    pub loss: Tensor<T>,
    /// L_D = -ssim value at this step.
    pub distortion: f64,
    /// L_P = -mean q_hat value at this step; NaN when beta == 0 skipped
    /// the metric entirely.
    pub perceptual: f64,
    /// Denominator applied to the mixture (1.0 for single-term bypass).
    pub denominator: f64,
}

/// Mean squared error between predicted and ground-truth quality scores.
pub fn quality_regression_loss<T: Scalar>(q_hat: &Tensor<T>, q: &[f64]) -> Result<Tensor<T>> {
    if q_hat.numel() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "quality_regression_loss",
            lhs: q_hat.shape().to_vec(),
            rhs: vec![q.len()],
        });
    }
    if let Some(bad) = q.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "quality_regression_loss: non-finite target {}",
            bad
        )));
    }
    let target = Tensor::from_vec(q.iter().map(|&v| T::from_f64(v)).collect(), q_hat.shape())?;
    let diff = q_hat.sub(&target)?;
    diff.mul(&diff)?.mean_all()
}

/// Distortion + perceptual mixture against a frozen metric. The metric
/// runs in eval mode; gradients flow only into the images.
pub fn combined_loss<T: Scalar>(
    x_sr: &Tensor<T>,
    x_hr: &Tensor<T>,
    metric: &PbanModel<T>,
    ssim_cfg: &SsimConfig,
    weights: &LossWeights,
    mode: DenominatorMode,
) -> Result<CombinedLoss<T>> {
    if metric.is_trainable() {
        return Err(Error::Contract(
            "combined_loss requires a frozen metric (closed loop); call set_trainable(false)"
                .into(),
        ));
    }
    let alpha = T::from_f64(weights.alpha);
    let beta = T::from_f64(weights.beta);

    // single-term reductions bypass the normalization so that (1,0) is
    // exactly the plain SSIM baseline and (0,1) the plain metric loss
    if weights.beta == 0.0 && mode == DenominatorMode::StopGrad {
        let l_d = ssim(x_sr, x_hr, ssim_cfg)?.neg()?;
        let value = l_d.to_scalar()?.to_f64();
        return Ok(CombinedLoss {
            loss: l_d.scale(alpha)?,
            distortion: value,
            perceptual: f64::NAN,
            denominator: 1.0,
        });
    }
    if weights.alpha == 0.0 && mode == DenominatorMode::StopGrad {
        let l_p = metric_term(x_sr, x_hr, metric)?;
        let value = l_p.to_scalar()?.to_f64();
        return Ok(CombinedLoss {
            loss: l_p.scale(beta)?,
            distortion: f64::NAN,
            perceptual: value,
            denominator: 1.0,
        });
    }

    let l_d = ssim(x_sr, x_hr, ssim_cfg)?.neg()?;
    let l_p = metric_term(x_sr, x_hr, metric)?;
    let d_val = l_d.to_scalar()?.to_f64();
    let p_val = l_p.to_scalar()?.to_f64();
    let num = l_d.scale(alpha)?.add(&l_p.scale(beta)?)?;
    match mode {
        DenominatorMode::StopGrad => {
            let den = (d_val + p_val).abs() + DENOM_EPS;
            Ok(CombinedLoss {
                loss: num.scale(T::from_f64(1.0 / den))?,
                distortion: d_val,
                perceptual: p_val,
                denominator: den,
            })
        }
        DenominatorMode::Literal => {
            let den_t = l_d.add(&l_p)?;
            Ok(CombinedLoss {
                loss: num.div(&den_t)?,
                distortion: d_val,
                perceptual: p_val,
                denominator: d_val + p_val,
            })
        }
    }
}

/// L_P = -mean(q_hat) with the metric in eval mode.
fn metric_term<T: Scalar>(
    x_sr: &Tensor<T>,
    x_hr: &Tensor<T>,
    metric: &PbanModel<T>,
) -> Result<Tensor<T>> {
    metric
        .forward(x_sr, x_hr, &mut RunMode::Eval)?
        .mean_all()?
        .neg()
}
