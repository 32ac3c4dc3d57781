use super::*;
use crate::seed;
use rand::Rng;

fn model64(channels: usize, tag: u64) -> PbanModel<f64> {
    let mut rng = seed::rng(tag, "net-test");
    PbanModel::new(
        PbanConfig { channels, ..PbanConfig::default() },
        &mut rng,
    )
    .unwrap()
}

fn image_like(tag: u64, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = seed::rng(tag, "net-input");
    let data: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(data, &[b, 3, h, w]).unwrap()
}

fn feature_like(tag: u64, b: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = seed::rng(tag, "net-feature");
    let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.random::<f64>() - 0.5).collect();
    Tensor::from_vec(data, &[b, c, h, w]).unwrap()
}

#[test]
fn feature_shape_for_48px_input() {
    let model = model64(16, 1);
    let x = image_like(1, 2, 48, 48);
    let (f_sr, f_hr) = model.extract_features(&x, &x).unwrap();
    assert_eq!(f_sr.shape(), &[2, 16, 24, 24]);
    assert_eq!(f_hr.shape(), &[2, 16, 24, 24]);
}

#[test]
fn tied_branches_give_identical_features() {
    let model = model64(8, 2);
    model.tie_symmetric().unwrap();
    let x = image_like(2, 1, 16, 16);
    let (f_sr, f_hr) = model.extract_features(&x, &x).unwrap();
    assert_eq!(f_sr.to_vec(), f_hr.to_vec());
}

#[test]
fn perturbing_sr_branch_leaves_hr_features_unchanged() {
    let model = model64(8, 3);
    let x = image_like(3, 1, 16, 16);
    let (_, f_hr_before) = model.extract_features(&x, &x).unwrap();
    let w = model.branch_sr.conv1.w.clone();
    let mut data = w.to_vec();
    for v in &mut data {
        *v += 0.37;
    }
    w.set_data(data).unwrap();
    let (_, f_hr_after) = model.extract_features(&x, &x).unwrap();
    assert_eq!(f_hr_before.to_vec(), f_hr_after.to_vec());
}

#[test]
fn indivisible_input_dims_are_rejected() {
    let model = model64(8, 4);
    let x = image_like(4, 1, 18, 18);
    let err = model.extract_features(&x, &x).unwrap_err();
    assert!(err.to_string().contains("divisible by 4"), "{}", err);
}

#[test]
fn identity_projection_returns_features_bitwise() {
    let model = model64(8, 5);
    let c = 8;
    // 1x1 identity kernel, zero bias
    let mut eye = vec![0.0f64; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    model.proj_sr_h.q.w.set_data(eye).unwrap();
    model.proj_sr_h.q.b.set_data(vec![0.0; c]).unwrap();
    let f = feature_like(5, 1, c, 4, 4);
    let (q, k, v) = model.qkv_project(&f, Branch::Sr, Axis::H).unwrap();
    assert_eq!(q.to_vec(), f.to_vec());
    assert_eq!(k.shape(), f.shape());
    assert_eq!(v.shape(), f.shape());
}

#[test]
fn attention_columns_sum_to_one() {
    let q = feature_like(6, 2, 4, 6, 5);
    let k = feature_like(7, 2, 4, 6, 5);
    for axis in [Axis::H, Axis::W] {
        let a = attention_scores(&q, &k, axis, 1e-8).unwrap();
        let shape = a.shape().to_vec();
        let (n, l) = (shape[0], shape[1]);
        let data = a.to_vec();
        for s in 0..n {
            for j in 0..l {
                let col: f64 = (0..l).map(|i| data[(s * l + i) * l + j]).sum();
                assert!((col - 1.0).abs() < 1e-6, "column sums to {}", col);
                for i in 0..l {
                    let v = data[(s * l + i) * l + j];
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}

#[test]
fn score_scaling_barely_moves_attention() {
    // Std(cS) = c Std(S) makes normalized scores scale-invariant up to eps
    let q = feature_like(8, 1, 4, 8, 8);
    let k = feature_like(9, 1, 4, 8, 8);
    let qs = super::to_slices(&q, Axis::H).unwrap();
    let ks = super::to_slices(&k, Axis::H).unwrap();
    let s = qs.transpose_last2().unwrap().matmul(&ks).unwrap();
    let a1 = normalized_softmax(&s, 1e-8).unwrap().to_vec();
    let a10 = normalized_softmax(&s.scale(10.0).unwrap(), 1e-8).unwrap().to_vec();
    for (x, y) in a1.iter().zip(&a10) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn constant_queries_give_uniform_attention_and_row_means() {
    // with every query identical the scores are constant down each
    // column, so attention averages the value columns uniformly
    let c = 4;
    let (h, w) = (6, 3);
    let q = Tensor::from_vec(vec![0.3f64; c * h * w], &[1, c, h, w]).unwrap();
    let k = feature_like(10, 1, c, h, w);
    let v = feature_like(11, 1, c, h, w);
    let a = attention_scores(&q, &k, Axis::H, 1e-8).unwrap();
    for val in a.to_vec() {
        assert!((val - 1.0 / h as f64).abs() < 1e-6);
    }
    let o = axial_cross_attention(&q, &k, &v, Axis::H, 1e-8).unwrap();
    let vd = v.to_vec();
    let od = o.to_vec();
    for ch in 0..c {
        for x in 0..w {
            let mean: f64 = (0..h).map(|y| vd[(ch * h + y) * w + x]).sum::<f64>() / h as f64;
            for y in 0..h {
                assert!((od[(ch * h + y) * w + x] - mean).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn degenerate_axis_is_rejected() {
    let q = feature_like(12, 1, 4, 1, 4);
    let err = axial_cross_attention(&q, &q, &q, Axis::H, 1e-8).unwrap_err();
    assert!(matches!(err, Error::Degenerate { .. }));
}

#[test]
fn tied_directions_coincide_on_equal_features() {
    let model = model64(8, 13);
    model.tie_symmetric().unwrap();
    let f = feature_like(13, 1, 8, 6, 6);
    let out = model.pba_plus_forward(&f, &f).unwrap();
    assert_eq!(out.o_hr_to_sr.to_vec(), out.o_sr_to_hr.to_vec());
    assert_eq!(out.o_hr_to_sr.shape(), f.shape());
}

#[test]
fn zeroed_final_gates_reduce_subec_to_quarter_residual() {
    let model = model64(8, 14);
    for gates in [&model.subec_hr_to_sr, &model.subec_sr_to_hr] {
        gates.channel_fc.w.set_data(vec![0.0; 64]).unwrap();
        gates.channel_fc.b.set_data(vec![0.0; 8]).unwrap();
        gates.spatial_conv2.w.set_data(vec![0.0; 8]).unwrap();
        gates.spatial_conv2.b.set_data(vec![0.0; 1]).unwrap();
    }
    let f_sr = feature_like(15, 1, 8, 4, 4);
    let f_hr = feature_like(16, 1, 8, 4, 4);
    let attn = model.pba_plus_forward(&f_sr, &f_hr).unwrap();
    let (o1, o2) = model.subec_fuse(&attn, &f_sr, &f_hr).unwrap();
    let expect1 = f_sr
        .add(&attn.o_hr_to_sr.scale(0.25).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(o1.to_vec(), expect1);
    let expect2 = f_hr
        .add(&attn.o_sr_to_hr.scale(0.25).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(o2.to_vec(), expect2);
}

#[test]
fn eval_forward_is_deterministic() {
    let model = model64(8, 17);
    let a = image_like(18, 2, 16, 16);
    let b = image_like(19, 2, 16, 16);
    let q1 = model.forward(&a, &b, &mut RunMode::Eval).unwrap();
    let q2 = model.forward(&a, &b, &mut RunMode::Eval).unwrap();
    assert_eq!(q1.to_vec(), q2.to_vec());
    assert_eq!(q1.shape(), &[2]);
}

#[test]
fn zeroed_head_outputs_zero() {
    let model = model64(8, 20);
    for head in [&model.head_hr_to_sr, &model.head_sr_to_hr] {
        head.fc1.w.set_data(vec![0.0; head.fc1.w.numel()]).unwrap();
        head.fc1.b.set_data(vec![0.0; head.fc1.b.numel()]).unwrap();
        head.fc2.w.set_data(vec![0.0; head.fc2.w.numel()]).unwrap();
        head.fc2.b.set_data(vec![0.0; head.fc2.b.numel()]).unwrap();
    }
    model.joint_fc1.w.set_data(vec![0.0; model.joint_fc1.w.numel()]).unwrap();
    model.joint_fc1.b.set_data(vec![0.0; model.joint_fc1.b.numel()]).unwrap();
    model.joint_fc2.w.set_data(vec![0.0; model.joint_fc2.w.numel()]).unwrap();
    model.joint_fc2.b.set_data(vec![0.0; model.joint_fc2.b.numel()]).unwrap();
    let a = image_like(21, 1, 16, 16);
    let q = model.forward(&a, &a, &mut RunMode::Eval).unwrap();
    assert_eq!(q.to_vec(), vec![0.0]);
}

#[test]
fn swap_invariance_with_tied_weights() {
    let model = model64(8, 22);
    model.tie_symmetric().unwrap();
    let a = image_like(23, 1, 16, 16);
    let b = image_like(24, 1, 16, 16);
    let q_ab = model.forward(&a, &b, &mut RunMode::Eval).unwrap();
    let q_ba = model.forward(&b, &a, &mut RunMode::Eval).unwrap();
    assert_eq!(q_ab.to_vec(), q_ba.to_vec());
}

#[test]
fn parameter_count_matches_formula_and_ignores_input_size() {
    let model = model64(16, 25);
    let c = 16usize;
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let lin = |o: usize, i: usize| o * i + o;
    let res = 2 * conv(c, c, 3);
    let expected = conv(c, 3, 3)
        + res              // stem block
        + 2 * res          // branches
        + 4 * 3 * conv(c, c, 1)
        + 2 * (lin(c, c) + conv(4 * c, 4 * c, 1) + conv(1, c, 1))
        + 2 * (lin(c / 2, c) + lin(c / 4, c / 2))
        + lin(c / 4, c / 2)
        + lin(1, c / 4);
    assert_eq!(model.parameter_count(), expected);
    // same model runs on any divisible-by-4 input size
    for size in [16usize, 32, 48] {
        let x = image_like(26, 1, size, size);
        model.forward(&x, &x, &mut RunMode::Eval).unwrap();
    }
}

#[test]
fn too_narrow_channel_config_is_rejected() {
    let mut rng = seed::rng(27, "net-test");
    let err = PbanModel::<f32>::new(
        PbanConfig { channels: 4, ..PbanConfig::default() },
        &mut rng,
    )
    .unwrap_err();
    assert!(err.to_string().contains("C >= 8"), "{}", err);
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = seed::rng(28, "net-test");
    let model = PbanModel::<f32>::new(PbanConfig::default(), &mut rng).unwrap();
    let mut rng_in = seed::rng(29, "net-input");
    let data: Vec<f32> = (0..3 * 16 * 16).map(|_| rng_in.random::<f32>()).collect();
    let x = Tensor::from_vec(data, &[1, 3, 16, 16]).unwrap();
    let q_before = model.forward(&x, &x, &mut RunMode::Eval).unwrap();
    model.save_checkpoint(&path).unwrap();
    let loaded = PbanModel::<f32>::load_checkpoint(&path).unwrap();
    let q_after = loaded.forward(&x, &x, &mut RunMode::Eval).unwrap();
    assert_eq!(q_before.to_vec(), q_after.to_vec());
    for ((n1, p1), (n2, p2)) in model
        .named_parameters()
        .iter()
        .zip(loaded.named_parameters().iter())
    {
        assert_eq!(n1, n2);
        assert_eq!(p1.to_vec(), p2.to_vec());
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = seed::rng(30, "net-test");
    let model = PbanModel::<f32>::new(PbanConfig { channels: 8, ..PbanConfig::default() }, &mut rng).unwrap();
    model.save_checkpoint(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&path, bytes).unwrap();
    let err = PbanModel::<f32>::load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("payload"), "{}", err);
}

#[test]
fn future_version_is_rejected_without_partial_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = seed::rng(31, "net-test");
    let model = PbanModel::<f32>::new(PbanConfig { channels: 8, ..PbanConfig::default() }, &mut rng).unwrap();
    model.save_checkpoint(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
    let text = String::from_utf8(bytes[..newline].to_vec()).unwrap();
    let bumped = text.replace("\"version\":1", "\"version\":999");
    let mut out = bumped.into_bytes();
    out.push(b'\n');
    out.extend_from_slice(&bytes[newline + 1..]);
    std::fs::write(&path, out).unwrap();
    let err = PbanModel::<f32>::load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("version 999"), "{}", err);
}

#[test]
fn unknown_parameter_name_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = seed::rng(32, "net-test");
    let model = PbanModel::<f32>::new(PbanConfig { channels: 8, ..PbanConfig::default() }, &mut rng).unwrap();
    let mut params = model.named_parameters();
    params[0].0 = "stem.conv.weirdo".to_string();
    checkpoint::save_params(&path, PbanModel::ARCH, 8, 1e-8, &params).unwrap();
    let err = PbanModel::<f32>::load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("unknown parameter"), "{}", err);
}

#[test]
fn frozen_model_excludes_parameters_from_gradients() {
    let mut model = model64(8, 33);
    model.set_trainable(false).unwrap();
    assert!(!model.is_trainable());
    let x = image_like(34, 1, 16, 16).with_grad().unwrap();
    let y = image_like(35, 1, 16, 16);
    let q = model.forward(&x, &y, &mut RunMode::Eval).unwrap();
    q.mean_all().unwrap().backward().unwrap();
    assert!(x.grad().is_some());
    for (_, p) in model.named_parameters() {
        assert!(p.grad().is_none());
    }
}
