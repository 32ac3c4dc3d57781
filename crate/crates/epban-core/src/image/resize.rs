//! Separable bicubic resampling (Catmull-Rom kernel, a = -0.5) with
//! edge-clamped taps and center-aligned coordinates.

use super::Image;
use crate::error::{Error, Result};

/// Catmull-Rom weight at distance `t` (a = -0.5).
fn catmull_rom(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// The four taps and weights for output position `out` of `out_len`
/// resampled from `in_len`, src = (out + 0.5) * in/out - 0.5.
fn taps(out: usize, out_len: usize, in_len: usize) -> ([usize; 4], [f64; 4]) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out as f64 + 0.5) * scale - 0.5;
    let base = src.floor();
    let frac = src - base;
    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    for k in 0..4 {
        let tap = base as isize + k as isize - 1;
        idx[k] = tap.clamp(0, in_len as isize - 1) as usize;
        w[k] = catmull_rom(frac + 1.0 - k as f64);
    }
    (idx, w)
}

/// Resample to `new_h` x `new_w`. Arithmetic runs in f64; the result is
/// clamped back into [0,1].
pub fn bicubic_resize(img: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(
            "bicubic_resize: target dimensions must be at least 1".into(),
        ));
    }
    let (h, w) = (img.height(), img.width());
    // vertical pass: h x w -> new_h x w, kept in f64
    let mut mid = vec![0.0f64; 3 * new_h * w];
    for oy in 0..new_h {
        let (idx, wt) = taps(oy, new_h, h);
        for c in 0..3 {
            for x in 0..w {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * img.get(c, idx[k], x) as f64;
                }
                mid[(c * new_h + oy) * w + x] = acc;
            }
        }
    }
    // horizontal pass: new_h x w -> new_h x new_w
    let mut out = Image::new(new_w, new_h);
    for ox in 0..new_w {
        let (idx, wt) = taps(ox, new_w, w);
        for c in 0..3 {
            for y in 0..new_h {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * mid[(c * new_h + y) * w + idx[k]];
                }
                out.set(c, y, ox, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::from_planes(5, 7, vec![0.5; 105]).unwrap();
        for (nh, nw) in [(3, 3), (7, 5), (14, 10), (1, 1)] {
            let r = bicubic_resize(&img, nh, nw).unwrap();
            for &v in r.data() {
                assert!((v - 0.5).abs() < 1e-6, "{}", v);
            }
        }
    }

    #[test]
    fn identity_resize_is_near_exact() {
        let mut img = Image::new(6, 6);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 23) as f32 / 23.0;
        }
        let r = bicubic_resize(&img, 6, 6).unwrap();
        for (a, b) in img.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn downscale_matches_direct_2d_kernel_oracle() {
        // 4x4 ramp halved; the oracle evaluates the full 2-D kernel sum
        // (outer product of the 1-D taps, clamped) at each output pixel
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let v = (y as f32 * 4.0 + x as f32) / 15.0;
                for c in 0..3 {
                    img.set(c, y, x, v);
                }
            }
        }
        let r = bicubic_resize(&img, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let (iy, wy) = taps(oy, 2, 4);
                let (ix, wx) = taps(ox, 2, 4);
                let mut oracle = 0.0f64;
                for ky in 0..4 {
                    for kx in 0..4 {
                        oracle += wy[ky] * wx[kx] * img.get(0, iy[ky], ix[kx]) as f64;
                    }
                }
                let got = r.get(0, oy, ox) as f64;
                assert!((got - oracle.clamp(0.0, 1.0)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn output_range_is_clamped() {
        // a sharp step can overshoot below 0 / above 1 before clamping
        let mut img = Image::new(8, 1);
        for x in 0..8 {
            let v = if x < 4 { 0.0 } else { 1.0 };
            for c in 0..3 {
                img.set(c, 0, x, v);
            }
        }
        let r = bicubic_resize(&img, 1, 16).unwrap();
        for &v in r.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
