//! Training pipelines: Adam, the two-stage metric schedule (stem frozen
//! first, everything fine-tuned at reduced rate second), and closed-loop
//! SR optimization of a tiny x2 upscaler against the frozen metric.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_pair, ScoredPair, Split};
use crate::error::{Error, Result};
use crate::image::{bicubic_resize, psnr, Image};
use crate::loss::{combined_loss, quality_regression_loss, DenominatorMode, LossWeights};
use crate::net::{self, PbanConfig, PbanModel, RunMode};
use crate::scalar::Scalar;
use crate::seed;
use crate::ssim::{ssim, SsimConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept in f64 regardless of the
/// parameter dtype; updates are deterministic.
pub struct AdamState<T: Scalar> {
    params: Vec<(String, Tensor<T>)>,
    hp: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, hp: AdamParams) -> Self {
        let m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamState { params, hp, m, v, t: 0 }
    }

    /// One update from the gradients currently accumulated on the
    /// parameters. Missing gradients count as zero (the parameter holds).
    pub fn step(&mut self, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        for (i, (name, p)) in self.params.iter().enumerate() {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let mut data = p.to_vec();
            for (j, gv) in grad.iter().enumerate() {
                let g = gv.to_f64();
                if !g.is_finite() {
                    return Err(Error::NonFinite { what: "gradient", context: name.clone() });
                }
                let m = self.hp.beta1 * self.m[i][j] + (1.0 - self.hp.beta1) * g;
                let v = self.hp.beta2 * self.v[i][j] + (1.0 - self.hp.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.hp.eps);
                data[j] = T::from_f64(data[j].to_f64() - update);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// One line of a training log; absent metrics are NaN and serialize as
/// empty CSV fields.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: String,
    pub split: String,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub metric_score: f64,
    pub plcc: f64,
    pub srcc: f64,
}

impl LogRow {
    fn blank(epoch: usize, stage: &str, split: &str) -> Self {
        LogRow {
            epoch,
            stage: stage.to_string(),
            split: split.to_string(),
            loss: f64::NAN,
            psnr: f64::NAN,
            ssim: f64::NAN,
            metric_score: f64::NAN,
            plcc: f64::NAN,
            srcc: f64::NAN,
        }
    }
}

/// Training log CSV with LF endings; NaN turns into an empty field.
pub fn write_training_log(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{:.6}", v) };
    let mut text = String::from("epoch,stage,split,loss,psnr,ssim,metric_score,plcc,srcc\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.stage,
            r.split,
            fmt(r.loss),
            fmt(r.psnr),
            fmt(r.ssim),
            fmt(r.metric_score),
            fmt(r.plcc),
            fmt(r.srcc),
        ));
    }
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(&path_str, e))
}

#[derive(Debug, Clone)]
pub struct MetricTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub stage2_lr_scale: f64,
    pub seed: u64,
    pub adam: AdamParams,
    pub channels: usize,
    pub eps: f64,
    pub dropout: f64,
}

impl Default for MetricTrainConfig {
    fn default() -> Self {
        MetricTrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs_stage1: 30,
            epochs_stage2: 10,
            stage2_lr_scale: 0.1,
            seed: 7,
            adam: AdamParams::default(),
            channels: 16,
            eps: 1e-8,
            dropout: 0.2,
        }
    }
}

impl MetricTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.stage2_lr_scale <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate, batch size and stage-2 scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct LoadedPair {
    sr: Image,
    hr: Image,
    mos: f64,
}

fn preload(manifest_dir: &Path, rows: &[&ScoredPair]) -> Result<Vec<LoadedPair>> {
    rows.iter()
        .map(|p| {
            let (sr, hr) = load_pair(manifest_dir, p)?;
            Ok(LoadedPair { sr, hr, mos: p.mos as f64 })
        })
        .collect()
}

fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(data, &[images.len(), 3, h, w])
}

fn correlations_or_nan(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let plcc = crate::eval::pearson(pred, target).unwrap_or(f64::NAN);
    let srcc = crate::eval::spearman(pred, target).unwrap_or(f64::NAN);
    (plcc, srcc)
}

/// Mean squared error between score vectors.
fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Two-stage metric training. Stage 1 freezes the shared stem; stage 2
/// fine-tunes everything at `learning_rate * stage2_lr_scale` with fresh
/// optimizer moments. The parameters with the best validation PLCC are
/// restored into the returned model.
pub fn train_metric(
    manifest_dir: &Path,
    pairs: &[ScoredPair],
    cfg: &MetricTrainConfig,
) -> Result<(PbanModel<f32>, Vec<LogRow>)> {
    cfg.validate()?;
    let train_rows: Vec<&ScoredPair> = pairs.iter().filter(|p| p.split == Split::Train).collect();
    let val_rows: Vec<&ScoredPair> = pairs.iter().filter(|p| p.split == Split::Val).collect();
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(Error::InvalidArgument(
            "train and val splits must both be non-empty".into(),
        ));
    }
    let train = preload(manifest_dir, &train_rows)?;
    let val = preload(manifest_dir, &val_rows)?;

    let mut init_rng = seed::rng(cfg.seed, "metric-init");
    let model = PbanModel::<f32>::new(
        PbanConfig { channels: cfg.channels, eps: cfg.eps, dropout: cfg.dropout },
        &mut init_rng,
    )?;
    let mut shuffle_rng = seed::rng(cfg.seed, "metric-shuffle");
    let mut dropout_rng = seed::rng(cfg.seed, "metric-dropout");

    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<Vec<f32>>)> = None;
    let mut epoch_counter = 0usize;

    // stage 1: stem frozen
    for (_, p) in model.stem_parameters() {
        p.set_requires_grad(false)?;
    }
    {
        let mut opt = AdamState::new(model.non_stem_parameters(), cfg.adam);
        for _ in 0..cfg.epochs_stage1 {
            epoch_counter += 1;
            metric_epoch(
                &model,
                &mut opt,
                cfg.learning_rate,
                cfg.batch_size,
                &train,
                &val,
                epoch_counter,
                "1",
                &mut shuffle_rng,
                &mut dropout_rng,
                &mut log,
                &mut best,
            )?;
        }
    }
    // stage 2: everything trainable at reduced rate
    for (_, p) in model.stem_parameters() {
        p.set_requires_grad(true)?;
    }
    {
        let mut opt = AdamState::new(model.named_parameters(), cfg.adam);
        let lr = cfg.learning_rate * cfg.stage2_lr_scale;
        for _ in 0..cfg.epochs_stage2 {
            epoch_counter += 1;
            metric_epoch(
                &model,
                &mut opt,
                lr,
                cfg.batch_size,
                &train,
                &val,
                epoch_counter,
                "2",
                &mut shuffle_rng,
                &mut dropout_rng,
                &mut log,
                &mut best,
            )?;
        }
    }
    if let Some((_, snapshot)) = best {
        for ((_, p), data) in model.named_parameters().iter().zip(snapshot) {
            p.set_data(data)?;
        }
    }
    Ok((model, log))
}

#[allow(clippy::too_many_arguments)]
fn metric_epoch(
    model: &PbanModel<f32>,
    opt: &mut AdamState<f32>,
    lr: f64,
    batch_size: usize,
    train: &[LoadedPair],
    val: &[LoadedPair],
    epoch: usize,
    stage: &str,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    log: &mut Vec<LogRow>,
    best: &mut Option<(f64, Vec<Vec<f32>>)>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(shuffle_rng);
    let mut train_pred = Vec::with_capacity(train.len());
    let mut train_mos = Vec::with_capacity(train.len());
    for chunk in order.chunks(batch_size) {
        let srs: Vec<&Image> = chunk.iter().map(|&i| &train[i].sr).collect();
        let hrs: Vec<&Image> = chunk.iter().map(|&i| &train[i].hr).collect();
        let mos: Vec<f64> = chunk.iter().map(|&i| train[i].mos).collect();
        let q = model.forward(
            &batch_tensor(&srs)?,
            &batch_tensor(&hrs)?,
            &mut RunMode::Train(dropout_rng),
        )?;
        let loss = quality_regression_loss(&q, &mos)?;
        let loss_val = loss.to_scalar()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { what: "loss", context: format!("epoch {}", epoch) });
        }
        for (_, p) in model.named_parameters() {
            p.zero_grad();
        }
        loss.backward()?;
        opt.step(lr)?;
        train_pred.extend(q.to_vec().iter().map(|v| *v as f64));
        train_mos.extend(mos);
    }
    let (plcc, srcc) = correlations_or_nan(&train_pred, &train_mos);
    log.push(LogRow {
        loss: mse(&train_pred, &train_mos),
        plcc,
        srcc,
        ..LogRow::blank(epoch, stage, "train")
    });

    // validation in eval mode
    let (val_pred, val_mos) = score_pairs(model, val)?;
    let (val_plcc, val_srcc) = correlations_or_nan(&val_pred, &val_mos);
    log.push(LogRow {
        loss: mse(&val_pred, &val_mos),
        plcc: val_plcc,
        srcc: val_srcc,
        ..LogRow::blank(epoch, stage, "val")
    });
    let improved = match best {
        Some((b, _)) => val_plcc > *b,
        None => !val_plcc.is_nan(),
    };
    if improved {
        let snapshot = model.named_parameters().iter().map(|(_, p)| p.to_vec()).collect();
        *best = Some((val_plcc, snapshot));
    }
    Ok(())
}

fn score_pairs(model: &PbanModel<f32>, data: &[LoadedPair]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::with_capacity(data.len());
    let mut target = Vec::with_capacity(data.len());
    for chunk in data.chunks(8) {
        let srs: Vec<&Image> = chunk.iter().map(|p| &p.sr).collect();
        let hrs: Vec<&Image> = chunk.iter().map(|p| &p.hr).collect();
        let q = model.forward(&batch_tensor(&srs)?, &batch_tensor(&hrs)?, &mut RunMode::Eval)?;
        pred.extend(q.to_vec().iter().map(|v| *v as f64));
        target.extend(chunk.iter().map(|p| p.mos));
    }
    Ok((pred, target))
}

/// Three-conv x2 upscaler finishing in a sub-pixel shuffle.
pub struct TinySrModel<T: Scalar> {
    pub(crate) conv1: net::ConvParams<T>,
    pub(crate) conv2: net::ConvParams<T>,
    pub(crate) conv3: net::ConvParams<T>,
}

impl<T: Scalar> TinySrModel<T> {
    pub const ARCH: &'static str = "tiny-sr";
    pub const WIDTH: usize = 32;

    /// Initialized as a noisy near-passthrough: delta kernels route each
    /// color to every sub-pixel position, so the untrained model already
    /// produces a nearest-neighbor upscale instead of a near-black frame
    /// the structural losses cannot recover from.
    pub fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv1 = delta_conv(rng, Self::WIDTH, 3, 3, |o| o % 3)?;
        let conv2 = delta_conv(rng, Self::WIDTH, Self::WIDTH, 3, |o| o)?;
        let conv3 = delta_conv(rng, 12, Self::WIDTH, 3, |o| o / 4)?;
        Ok(TinySrModel { conv1, conv2, conv3 })
    }

    pub fn forward(&self, lr_input: &Tensor<T>) -> Result<Tensor<T>> {
        lr_input
            .conv2d(&self.conv1.w, Some(&self.conv1.b), 1, 1)?
            .relu()?
            .conv2d(&self.conv2.w, Some(&self.conv2.b), 1, 1)?
            .relu()?
            .conv2d(&self.conv3.w, Some(&self.conv3.b), 1, 1)?
            .pixel_shuffle(2)
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("sr.conv1.w".into(), self.conv1.w.clone()),
            ("sr.conv1.b".into(), self.conv1.b.clone()),
            ("sr.conv2.w".into(), self.conv2.w.clone()),
            ("sr.conv2.b".into(), self.conv2.b.clone()),
            ("sr.conv3.w".into(), self.conv3.w.clone()),
            ("sr.conv3.b".into(), self.conv3.b.clone()),
        ]
    }
}

impl TinySrModel<f32> {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        net::checkpoint::save_params(path, Self::ARCH, Self::WIDTH, 0.0, &self.named_parameters())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let (_, loaded) = net::checkpoint::load_params(&path, Self::ARCH)?;
        let mut rng = seed::rng(0, "tiny-sr-init");
        let model = TinySrModel::new(&mut rng)?;
        net::checkpoint::fill_named(&model.named_parameters(), loaded, &path_str)?;
        Ok(model)
    }
}

/// Scaled-down He noise plus a center-tap delta from input channel
/// `route(o)` to output channel `o`.
fn delta_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    route: impl Fn(usize) -> usize,
) -> Result<net::ConvParams<T>> {
    let params = net::conv_init(rng, c_out, c_in, k)?;
    let mut w = params.w.to_vec();
    let damp = T::from_f64(0.1);
    for v in &mut w {
        *v = *v * damp;
    }
    let center = k / 2;
    for o in 0..c_out {
        let idx = ((o * c_in + route(o)) * k + center) * k + center;
        w[idx] = w[idx] + T::ONE;
    }
    params.w.set_data(w)?;
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct SrTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub denominator_mode: DenominatorMode,
    pub ssim: SsimConfig,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        SrTrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 30,
            seed: 7,
            adam: AdamParams::default(),
            weights: LossWeights { alpha: 0.5, beta: 0.5 },
            denominator_mode: DenominatorMode::StopGrad,
            ssim: SsimConfig::default(),
        }
    }
}

/// Per-epoch validation summary of an SR model.
pub struct SrValidation {
    pub psnr: f64,
    pub ssim: f64,
    pub metric_score: f64,
}

/// The unique HR references of a split, in manifest order.
pub fn split_references(pairs: &[ScoredPair], split: Split) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in pairs.iter().filter(|p| p.split == split) {
        if !out.contains(&p.hr_path) {
            out.push(p.hr_path.clone());
        }
    }
    out
}

struct SrSample {
    lr: Image,
    hr: Image,
}

fn load_sr_samples(manifest_dir: &Path, refs: &[String]) -> Result<Vec<SrSample>> {
    refs.iter()
        .map(|name| {
            let hr = crate::image::read_ppm(manifest_dir.join(name))?;
            let lr = bicubic_resize(&hr, hr.height() / 2, hr.width() / 2)?;
            Ok(SrSample { lr, hr })
        })
        .collect()
}

/// Closed-loop SR optimization on full images (no patch cropping) with
/// the combined distortion + perceptual loss and a frozen metric.
/// Logs an epoch-0 validation row before the first update.
pub fn optimize_sr(
    sr_model: &TinySrModel<f32>,
    metric: &PbanModel<f32>,
    manifest_dir: &Path,
    pairs: &[ScoredPair],
    cfg: &SrTrainConfig,
) -> Result<Vec<LogRow>> {
    if metric.is_trainable() {
        return Err(Error::Contract(
            "optimize_sr requires a frozen metric; call set_trainable(false)".into(),
        ));
    }
    if cfg.denominator_mode == DenominatorMode::Literal
        && cfg.weights.alpha == cfg.weights.beta
    {
        return Err(Error::Contract(
            "alpha == beta with stop-gradient disabled makes the loss constant \
             (see the combined-loss degeneracy diagnostic); refusing to train"
                .into(),
        ));
    }
    let train_refs = split_references(pairs, Split::Train);
    let val_refs = split_references(pairs, Split::Val);
    if train_refs.is_empty() || val_refs.is_empty() {
        return Err(Error::InvalidArgument(
            "train and val splits must both contain references".into(),
        ));
    }
    let train = load_sr_samples(manifest_dir, &train_refs)?;
    let val = load_sr_samples(manifest_dir, &val_refs)?;

    let mut log = Vec::new();
    let v0 = validate_sr(sr_model, metric, &val, &cfg.ssim)?;
    log.push(LogRow {
        psnr: v0.psnr,
        ssim: v0.ssim,
        metric_score: v0.metric_score,
        ..LogRow::blank(0, "sr", "val")
    });

    let mut shuffle_rng = seed::rng(cfg.seed, "sr-shuffle");
    let mut opt = AdamState::new(sr_model.named_parameters(), cfg.adam);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lrs: Vec<&Image> = chunk.iter().map(|&i| &train[i].lr).collect();
            let hrs: Vec<&Image> = chunk.iter().map(|&i| &train[i].hr).collect();
            let pred = sr_model.forward(&batch_tensor::<f32>(&lrs)?)?;
            let out = combined_loss(
                &pred,
                &batch_tensor::<f32>(&hrs)?,
                metric,
                &cfg.ssim,
                &cfg.weights,
                cfg.denominator_mode,
            )?;
            let loss_val = out.loss.to_scalar()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite { what: "loss", context: format!("epoch {}", epoch) });
            }
            for (_, p) in sr_model.named_parameters() {
                p.zero_grad();
            }
            out.loss.backward()?;
            opt.step(cfg.learning_rate)?;
            loss_sum += loss_val;
            batches += 1;
        }
        log.push(LogRow {
            loss: loss_sum / batches as f64,
            ..LogRow::blank(epoch, "sr", "train")
        });
        let v = validate_sr(sr_model, metric, &val, &cfg.ssim)?;
        log.push(LogRow {
            psnr: v.psnr,
            ssim: v.ssim,
            metric_score: v.metric_score,
            ..LogRow::blank(epoch, "sr", "val")
        });
    }
    Ok(log)
}

/// Mean PSNR / SSIM / metric score of the upscaler over validation
/// references (predictions clamped into [0,1] for scoring).
fn validate_sr(
    sr_model: &TinySrModel<f32>,
    metric: &PbanModel<f32>,
    val: &[SrSample],
    ssim_cfg: &SsimConfig,
) -> Result<SrValidation> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut score_sum = 0.0;
    for sample in val {
        let pred = sr_model.forward(&batch_tensor::<f32>(&[&sample.lr])?)?;
        let pred_img = Image::from_tensor(&pred)?;
        psnr_sum += psnr(&pred_img, &sample.hr)? as f64;
        let pred_t = pred_img.to_tensor::<f32>();
        let hr_t = sample.hr.to_tensor::<f32>();
        ssim_sum += ssim(&pred_t, &hr_t, ssim_cfg)?.to_scalar()? as f64;
        score_sum += metric.forward(&pred_t, &hr_t, &mut RunMode::Eval)?.to_scalar()? as f64;
    }
    let n = val.len() as f64;
    Ok(SrValidation {
        psnr: psnr_sum / n,
        ssim: ssim_sum / n,
        metric_score: score_sum / n,
    })
}

#[cfg(test)]
mod tests;
