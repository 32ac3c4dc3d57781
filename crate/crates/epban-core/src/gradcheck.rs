//! Central finite-difference gradient checking.
//!
//! The checker rebuilds the scalar loss from perturbed copies of the
//! inputs, so it stays independent of the reverse-mode path it verifies.
//! All checks run in f64; the tolerances are unreachable in f32.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::seed;
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the max relative error.
pub const REL_TOL: f64 = 1e-4;

pub struct GradCheckRow {
    pub op: String,
    pub max_rel_err: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed())
    }
}

/// Relative error with a floor that keeps near-zero gradient pairs from
/// amplifying finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare reverse-mode gradients of `f` against central differences for
/// every element of every input. `f` receives leaf tensors (grad-enabled)
/// matching `inputs` and must return a scalar loss. Returns the max
/// relative error over all components.
pub fn check_fn<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::from_vec(data.clone(), shape)?.with_grad())
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;

    let eval = |probe: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let ts: Vec<Tensor<f64>> = probe
            .iter()
            .map(|(shape, data)| Tensor::from_vec(data.clone(), shape))
            .collect::<Result<_>>()?;
        f(&ts)?.to_scalar()
    };

    let mut max_err = 0.0f64;
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for i in 0..analytic.len() {
            let mut probe: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
            probe[which].1[i] += FD_STEP;
            let plus = eval(&probe)?;
            probe[which].1[i] -= 2.0 * FD_STEP;
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Uniform values in (lo, hi), nudged away from zero by `clearance` so
/// kinked ops (relu) are not sampled within a finite-difference step of
/// their kink.
pub fn sample(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, clearance: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v = lo + (hi - lo) * rng.random::<f64>();
            if v.abs() < clearance {
                v = if v >= 0.0 { clearance } else { -clearance };
            }
            v
        })
        .collect()
}

/// Finite-difference suite over every differentiable tensor operation.
pub fn tensor_op_suite(seed_root: u64) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed_root, "gradcheck-tensor");
    let mut rows = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<(Vec<usize>, Vec<f64>)>,
                   f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>|
     -> Result<()> {
        let err = check_fn(&inputs, f)?;
        rows.push(GradCheckRow { op: name.to_string(), max_rel_err: err });
        Ok(())
    };

    // random weighting makes the scalar loss sensitive to every output
    let weights = |rng: &mut ChaCha8Rng, n: usize| sample(rng, n, -1.0, 1.0, 0.05);

    let u = sample(&mut rng, 20, -1.0, 1.0, 1e-3);
    let v = sample(&mut rng, 20, -1.0, 1.0, 0.2); // divisor kept away from 0
    let w20 = weights(&mut rng, 20);
    {
        let w = w20.clone();
        run("add", vec![(vec![4, 5], u.clone()), (vec![4, 5], v.clone())], &move |t| {
            weighted_sum(&t[0].add(&t[1])?, &w)
        })?;
    }
    {
        let w = w20.clone();
        run("sub", vec![(vec![4, 5], u.clone()), (vec![4, 5], v.clone())], &move |t| {
            weighted_sum(&t[0].sub(&t[1])?, &w)
        })?;
    }
    {
        let w = w20.clone();
        run("mul", vec![(vec![4, 5], u.clone()), (vec![4, 5], v.clone())], &move |t| {
            weighted_sum(&t[0].mul(&t[1])?, &w)
        })?;
    }
    {
        let w = w20.clone();
        run("div", vec![(vec![4, 5], u.clone()), (vec![4, 5], v.clone())], &move |t| {
            weighted_sum(&t[0].div(&t[1])?, &w)
        })?;
    }
    {
        // broadcast paths: [4,5] against [1,5] and per-batch scalars
        let small = sample(&mut rng, 5, 0.3, 1.2, 0.0);
        let w = w20.clone();
        run("add_broadcast", vec![(vec![4, 5], u.clone()), (vec![1, 5], small.clone())], &move |t| {
            weighted_sum(&t[0].add(&t[1])?, &w)
        })?;
        let w = w20.clone();
        run("mul_broadcast", vec![(vec![4, 5], u.clone()), (vec![1, 5], small.clone())], &move |t| {
            weighted_sum(&t[0].mul(&t[1])?, &w)
        })?;
        let per_batch = sample(&mut rng, 2, 0.4, 1.5, 0.0);
        let x2 = sample(&mut rng, 2 * 3 * 3, -1.0, 1.0, 1e-3);
        let w18 = weights(&mut rng, 18);
        run("div_broadcast", vec![(vec![2, 3, 3], x2), (vec![2, 1, 1], per_batch)], &move |t| {
            weighted_sum(&t[0].div(&t[1])?, &w18)
        })?;
    }
    {
        let w = w20.clone();
        run("affine", vec![(vec![4, 5], u.clone())], &move |t| {
            weighted_sum(&t[0].affine(1.7, -0.3)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 20, -1.0, 1.0, 1e-2);
        let w = w20.clone();
        run("relu", vec![(vec![4, 5], x)], &move |t| weighted_sum(&t[0].relu()?, &w))?;
    }
    {
        let w = w20.clone();
        run("sigmoid", vec![(vec![4, 5], u.clone())], &move |t| {
            weighted_sum(&t[0].sigmoid()?, &w)
        })?;
    }
    {
        let a = sample(&mut rng, 20, -1.0, 1.0, 1e-3);
        let b = sample(&mut rng, 15, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 12);
        run("matmul", vec![(vec![4, 5], a), (vec![5, 3], b)], &move |t| {
            weighted_sum(&t[0].matmul(&t[1])?, &w)
        })?;
    }
    {
        let a = sample(&mut rng, 2 * 3 * 4, -1.0, 1.0, 1e-3);
        let b = sample(&mut rng, 2 * 4 * 2, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 2 * 3 * 2);
        run("matmul_batched", vec![(vec![2, 3, 4], a), (vec![2, 4, 2], b)], &move |t| {
            weighted_sum(&t[0].matmul(&t[1])?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 2 * 4 * 3, -2.0, 2.0, 1e-3);
        let w = weights(&mut rng, 24);
        run("softmax", vec![(vec![2, 4, 3], x)], &move |t| {
            weighted_sum(&t[0].softmax(1)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 3 * 4 * 4, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 3);
        run("stddev_all", vec![(vec![3, 4, 4], x)], &move |t| {
            weighted_sum(&t[0].std_all(&[0])?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 1 * 2 * 4 * 4, -1.0, 1.0, 1e-3);
        let wt = sample(&mut rng, 3 * 2 * 3 * 3, -0.5, 0.5, 1e-3);
        let bias = sample(&mut rng, 3, -0.5, 0.5, 1e-3);
        let w = weights(&mut rng, 3 * 4 * 4);
        run(
            "conv2d",
            vec![(vec![1, 2, 4, 4], x), (vec![3, 2, 3, 3], wt), (vec![3], bias)],
            &move |t| weighted_sum(&t[0].conv2d(&t[1], Some(&t[2]), 1, 1)?, &w),
        )?;
    }
    {
        let x = sample(&mut rng, 1 * 2 * 4 * 4, -1.0, 1.0, 1e-3);
        let wt = sample(&mut rng, 4 * 2 * 3 * 3, -0.5, 0.5, 1e-3);
        let w = weights(&mut rng, 4 * 2 * 2);
        run(
            "conv2d_strided",
            vec![(vec![1, 2, 4, 4], x), (vec![4, 2, 3, 3], wt)],
            &move |t| weighted_sum(&t[0].conv2d(&t[1], None, 2, 1)?, &w),
        )?;
    }
    {
        let x = sample(&mut rng, 3 * 4, -1.0, 1.0, 1e-3);
        let wt = sample(&mut rng, 2 * 4, -0.8, 0.8, 1e-3);
        let bias = sample(&mut rng, 2, -0.5, 0.5, 1e-3);
        let w = weights(&mut rng, 6);
        run(
            "linear",
            vec![(vec![3, 4], x), (vec![2, 4], wt), (vec![2], bias)],
            &move |t| weighted_sum(&t[0].linear(&t[1], Some(&t[2]))?, &w),
        )?;
    }
    {
        let x = sample(&mut rng, 1 * 2 * 6 * 6, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 2 * 3 * 3);
        run("avg_pool2d", vec![(vec![1, 2, 6, 6], x)], &move |t| {
            weighted_sum(&t[0].avg_pool2d(2, 2)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 2 * 3);
        run("global_avg_pool2d", vec![(vec![2, 3, 4, 4], x)], &move |t| {
            weighted_sum(&t[0].global_avg_pool2d()?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 2 * 3 * 4, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 8);
        run("mean_axes", vec![(vec![2, 3, 4], x)], &move |t| {
            weighted_sum(&t[0].mean_axes(&[1], false)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 12, -1.0, 1.0, 1e-3);
        run("mean_all", vec![(vec![3, 4], x)], &|t| t[0].mean_all())?;
    }
    {
        let x = sample(&mut rng, 12, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 12);
        run("flatten", vec![(vec![3, 2, 2], x)], &move |t| {
            weighted_sum(&t[0].flatten(1)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 2 * 3 * 4, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 24);
        run("permute", vec![(vec![2, 3, 4], x)], &move |t| {
            weighted_sum(&t[0].permute(&[2, 0, 1])?, &w)
        })?;
    }
    {
        let a = sample(&mut rng, 6, -1.0, 1.0, 1e-3);
        let b = sample(&mut rng, 9, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 15);
        run("concat", vec![(vec![3, 2], a), (vec![3, 3], b)], &move |t| {
            weighted_sum(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 16, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 16);
        run("dropout_eval", vec![(vec![4, 4], x)], &move |t| {
            weighted_sum(&t[0].dropout(0.5, crate::tensor::DropoutMode::Eval)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 1 * 8 * 2 * 2, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 32);
        run("pixel_shuffle", vec![(vec![1, 8, 2, 2], x)], &move |t| {
            weighted_sum(&t[0].pixel_shuffle(2)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 1 * 2 * 4 * 4, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 32);
        run("pixel_unshuffle", vec![(vec![1, 2, 4, 4], x)], &move |t| {
            weighted_sum(&t[0].pixel_unshuffle(2)?, &w)
        })?;
    }
    {
        let x = sample(&mut rng, 1 * 8 * 2 * 2, -1.0, 1.0, 1e-3);
        let w = weights(&mut rng, 32);
        run("channel_shuffle", vec![(vec![1, 8, 2, 2], x)], &move |t| {
            weighted_sum(&t[0].channel_shuffle(4)?, &w)
        })?;
    }

    Ok(GradCheckReport { rows })
}

/// Scalar loss sum(out * w) exposing every output component to the check.
pub fn weighted_sum(out: &Tensor<f64>, w: &[f64]) -> Result<Tensor<f64>> {
    let wt = Tensor::from_vec(w.to_vec(), out.shape())?;
    out.mul(&wt)?.sum_all()
}

/// Gradient checks through the network blocks and the full model.
pub fn net_suite(seed_root: u64) -> Result<GradCheckReport> {
    use crate::net::{axial_cross_attention, Axis, PbanConfig, PbanModel, RunMode};

    let mut rng = seed::rng(seed_root, "gradcheck-net");
    let mut rows = Vec::new();

    // PBA+ style block at C=4 on 8x8 features: projections fixed,
    // gradients checked through scores, std normalization, softmax and
    // the H/W average w.r.t. both feature maps.
    {
        let c = 4;
        let n = c * 8 * 8;
        let f_sr = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let f_hr = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let w = sample(&mut rng, n, -1.0, 1.0, 0.05);
        let mut proj = Vec::new();
        for _ in 0..6 {
            let pw = Tensor::from_vec(sample(&mut rng, c * c, -0.5, 0.5, 1e-3), &[c, c, 1, 1])?;
            let pb = Tensor::from_vec(sample(&mut rng, c, -0.2, 0.2, 1e-3), &[c])?;
            proj.push((pw, pb));
        }
        let err = check_fn(
            &[(vec![1, c, 8, 8], f_sr), (vec![1, c, 8, 8], f_hr)],
            move |t| {
                let project = |x: &Tensor<f64>, i: usize| {
                    x.conv2d(&proj[i].0, Some(&proj[i].1), 1, 0)
                };
                let mut per_axis = Vec::new();
                for (axis, base) in [(Axis::H, 0), (Axis::W, 3)] {
                    let q = project(&t[0], base)?;
                    let k = project(&t[1], base + 1)?;
                    let v = project(&t[0], base + 2)?;
                    per_axis.push(axial_cross_attention(&q, &k, &v, axis, 1e-8)?);
                }
                let o = per_axis[0].add(&per_axis[1])?.scale(0.5)?;
                weighted_sum(&o, &w)
            },
        )?;
        rows.push(GradCheckRow { op: "attention_block".into(), max_rel_err: err });
    }

    let cfg = PbanConfig { channels: 8, ..PbanConfig::default() };
    let mut model = PbanModel::<f64>::new(cfg, &mut rng)?;
    model.set_trainable(false)?;

    // qkv projection through the real model parameters
    {
        let f = sample(&mut rng, 8 * 6 * 6, -1.0, 1.0, 1e-3);
        let w = sample(&mut rng, 3 * 8 * 6 * 6, -1.0, 1.0, 0.05);
        let m = &model;
        let err = check_fn(&[(vec![1, 8, 6, 6], f)], |t| {
            let (q, k, v) = m.qkv_project(&t[0], crate::net::Branch::Sr, Axis::H)?;
            let cat = Tensor::concat(&[q, k, v], 1)?;
            weighted_sum(&cat, &w)
        })?;
        rows.push(GradCheckRow { op: "qkv_projection".into(), max_rel_err: err });
    }

    // SubEC fusion w.r.t. attention outputs and base features
    {
        let n = 8 * 4 * 4;
        let attn1 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let attn2 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let f1 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let f2 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let w = sample(&mut rng, 2 * n, -1.0, 1.0, 0.05);
        let m = &model;
        let err = check_fn(
            &[
                (vec![1, 8, 4, 4], attn1),
                (vec![1, 8, 4, 4], attn2),
                (vec![1, 8, 4, 4], f1),
                (vec![1, 8, 4, 4], f2),
            ],
            |t| {
                let attn = crate::net::AxialAttentionOutput {
                    o_hr_to_sr: t[0].clone(),
                    o_sr_to_hr: t[1].clone(),
                };
                let (a, b) = m.subec_fuse(&attn, &t[2], &t[3])?;
                weighted_sum(&Tensor::concat(&[a, b], 1)?, &w)
            },
        )?;
        rows.push(GradCheckRow { op: "subec_fuse".into(), max_rel_err: err });
    }

    // quality head in eval mode
    {
        let n = 8 * 4 * 4;
        let o1 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let o2 = sample(&mut rng, n, -1.0, 1.0, 1e-3);
        let m = &model;
        let err = check_fn(&[(vec![1, 8, 4, 4], o1), (vec![1, 8, 4, 4], o2)], |t| {
            m.quality_head_forward(&t[0], &t[1], &mut RunMode::Eval)?.mean_all()
        })?;
        rows.push(GradCheckRow { op: "quality_head".into(), max_rel_err: err });
    }

    // full network, gradient w.r.t. the SR input image
    {
        let x_sr = sample(&mut rng, 3 * 16 * 16, 0.05, 0.95, 0.0);
        let x_hr = Tensor::from_vec(sample(&mut rng, 3 * 16 * 16, 0.05, 0.95, 0.0), &[1, 3, 16, 16])?;
        let m = &model;
        let err = check_fn(&[(vec![1, 3, 16, 16], x_sr)], |t| {
            m.forward(&t[0], &x_hr, &mut RunMode::Eval)?.mean_all()
        })?;
        rows.push(GradCheckRow { op: "network_input".into(), max_rel_err: err });
    }

    // spot-check gradients w.r.t. every parameter tensor
    {
        model.set_trainable(true)?;
        let err = net_param_spot_check(&model, seed_root)?;
        rows.push(GradCheckRow { op: "network_params".into(), max_rel_err: err });
    }

    Ok(GradCheckReport { rows })
}

/// Finite differences on a few entries of every model parameter against
/// the reverse-mode gradients of the scalar network output.
fn net_param_spot_check(model: &crate::net::PbanModel<f64>, seed_root: u64) -> Result<f64> {
    use crate::net::RunMode;
    let mut rng = seed::rng(seed_root, "gradcheck-net-params");
    let x_sr = Tensor::from_vec(sample(&mut rng, 3 * 16 * 16, 0.05, 0.95, 0.0), &[1, 3, 16, 16])?;
    let x_hr = Tensor::from_vec(sample(&mut rng, 3 * 16 * 16, 0.05, 0.95, 0.0), &[1, 3, 16, 16])?;
    for (_, p) in model.named_parameters() {
        p.zero_grad();
    }
    let q = model.forward(&x_sr, &x_hr, &mut RunMode::Eval)?;
    q.backward()?;
    let mut max_err = 0.0f64;
    for (name, p) in model.named_parameters() {
        let analytic = p
            .grad()
            .ok_or_else(|| crate::error::Error::Contract(format!("{name} received no gradient")))?;
        let n = p.numel();
        let mut probes = vec![0, n / 2, n - 1];
        probes.dedup();
        for idx in probes {
            let base = p.to_vec();
            let mut plus = base.clone();
            plus[idx] += FD_STEP;
            p.set_data(plus)?;
            let f_plus = model.forward(&x_sr, &x_hr, &mut RunMode::Eval)?.to_scalar()?;
            let mut minus = base.clone();
            minus[idx] -= FD_STEP;
            p.set_data(minus)?;
            let f_minus = model.forward(&x_sr, &x_hr, &mut RunMode::Eval)?.to_scalar()?;
            p.set_data(base)?;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[idx], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Gradient check of the differentiable SSIM w.r.t. its first argument.
pub fn ssim_suite(seed_root: u64) -> Result<GradCheckReport> {
    use crate::ssim::{ssim, SsimConfig};
    let mut rng = seed::rng(seed_root, "gradcheck-ssim");
    let a = sample(&mut rng, 3 * 16 * 16, 0.02, 0.98, 0.0);
    let b = Tensor::from_vec(sample(&mut rng, 3 * 16 * 16, 0.02, 0.98, 0.0), &[1, 3, 16, 16])?;
    let err = check_fn(&[(vec![1, 3, 16, 16], a)], move |t| {
        ssim(&t[0], &b, &SsimConfig::default())
    })?;
    Ok(GradCheckReport {
        rows: vec![GradCheckRow { op: "ssim".into(), max_rel_err: err }],
    })
}

/// Everything: tensor ops, SSIM, network blocks and the full model.
pub fn full_suite(seed_root: u64) -> Result<GradCheckReport> {
    let mut rows = tensor_op_suite(seed_root)?.rows;
    rows.extend(ssim_suite(seed_root)?.rows);
    rows.extend(net_suite(seed_root)?.rows);
    Ok(GradCheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tensor_op_matches_finite_differences() {
        let report = tensor_op_suite(99).unwrap();
        for row in &report.rows {
            assert!(
                row.passed(),
                "{} failed gradcheck: max rel err {:.3e}",
                row.op,
                row.max_rel_err
            );
        }
    }

    #[test]
    fn matmul_hand_oracle() {
        // frozen from the 2x2 . 2x1 hand multiplication
        let a = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0f64, 1.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(
            vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        )
        .unwrap();
        let out = eye.matmul(&eye).unwrap();
        assert_eq!(out.to_vec(), eye.to_vec());
    }
}

#[cfg(test)]
mod net_suite_tests {
    use super::*;

    #[test]
    fn network_and_ssim_suites_pass() {
        let report = full_suite(7).unwrap();
        for row in &report.rows {
            assert!(
                row.passed(),
                "{} failed gradcheck: max rel err {:.3e}",
                row.op,
                row.max_rel_err
            );
        }
        assert!(report.all_passed());
    }
}
