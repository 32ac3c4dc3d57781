//! Images as [0,1] float RGB planes, channels-first, plus the operators
//! used to synthesize training data.

mod degrade;
mod ppm;
mod resize;

pub use degrade::{degrade, gaussian_blur, DegradationRecipe};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use resize::bicubic_resize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR value reported for bitwise-identical images (MSE = 0).
pub const PSNR_CAP_DB: f32 = 100.0;

/// Decoded raster: three channels-first planes of f32 in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Plane-major: data[c * H * W + y * W + x].
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "image data of {} values does not match 3x{}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Clamp every value into [0,1].
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Lift into a [1,3,H,W] tensor of the requested element type.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(data, &[1, 3, self.height, self.width])
            .expect("image dims always consistent")
    }

    /// Back from a [1,3,H,W] (or [3,H,W]) tensor, clamping into [0,1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let shape = t.shape();
        let (c, h, w) = match shape.len() {
            4 if shape[0] == 1 => (shape[1], shape[2], shape[3]),
            3 => (shape[0], shape[1], shape[2]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "image_from_tensor",
                    shape: shape.to_vec(),
                    msg: "expected [1,3,H,W] or [3,H,W]".into(),
                })
            }
        };
        if c != 3 {
            return Err(Error::InvalidShape {
                op: "image_from_tensor",
                shape: shape.to_vec(),
                msg: "expected 3 channels".into(),
            });
        }
        let data: Vec<f32> = t
            .to_vec()
            .iter()
            .map(|&v| (v.to_f64() as f32).clamp(0.0, 1.0))
            .collect();
        Image::from_planes(w, h, data)
    }
}

/// Peak signal-to-noise ratio on the unit range: 10*log10(1/MSE) over the
/// RGB-mean squared error, capped at [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f32> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: vec![3, a.height, a.width],
            rhs: vec![3, b.height, b.width],
        });
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB as f64) as f32)
}
