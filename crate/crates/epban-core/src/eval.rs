//! Correlation statistics, metric evaluation against oracle scores, and
//! the loss-weight ablation sweep.

use std::path::Path;

use crate::data::{load_pair, ScoredPair, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::loss::LossWeights;
use crate::net::{PbanModel, RunMode};

#[derive(Debug, Clone, Copy)]
pub struct CorrelationReport {
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

/// Sample Pearson linear correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal series of length >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input series has zero variance".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Fractional ranks with ties receiving the average of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // positions i..=j share the averaged 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal series of length >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// PLCC and SRCC of predictions against targets.
pub fn correlation_report(predicted: &[f64], target: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        plcc: pearson(predicted, target)?,
        srcc: spearman(predicted, target)?,
        n: predicted.len(),
    })
}

/// Run the metric in eval mode over one split and correlate the scores
/// with the manifest's oracle MOS.
pub fn eval_metric(
    model: &PbanModel<f32>,
    manifest_dir: &Path,
    pairs: &[ScoredPair],
    split: Split,
) -> Result<CorrelationReport> {
    let rows: Vec<&ScoredPair> = pairs.iter().filter(|p| p.split == split).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("split {} is empty", split)));
    }
    let scores = exec::map_indexed(rows.len(), |i| -> Result<(f64, f64)> {
        let (sr, hr) = load_pair(manifest_dir, rows[i])?;
        let q = model
            .forward(&sr.to_tensor(), &hr.to_tensor(), &mut RunMode::Eval)?
            .to_scalar()?;
        Ok((q as f64, rows[i].mos as f64))
    });
    let mut predicted = Vec::with_capacity(rows.len());
    let mut target = Vec::with_capacity(rows.len());
    for s in scores {
        let (p, t) = s?;
        predicted.push(p);
        target.push(t);
    }
    correlation_report(&predicted, &target)
}

/// One sweep point of the loss-weight ablation.
#[derive(Debug, Clone)]
pub struct AblationRow {
    /// beta/alpha label, e.g. "5/5".
    pub label: String,
    pub weights: LossWeights,
    pub psnr: f64,
    pub ssim: f64,
    pub metric_score: f64,
    /// Set when this sweep point failed; the numeric fields are NaN.
    pub error: Option<String>,
}

/// Train one upscaler per weight ratio from an identical init and score
/// each on the validation references. Failed points are marked and do
/// not stop the sweep. Points run in parallel when enabled; rows come
/// back in ratio order either way.
pub fn ablation_sweep(
    manifest_dir: &Path,
    pairs: &[ScoredPair],
    metric: &PbanModel<f32>,
    base: &crate::train::SrTrainConfig,
    ratios: &[LossWeights],
) -> Vec<AblationRow> {
    let rows = exec::map_indexed(ratios.len(), |i| {
        let weights = ratios[i];
        let mut cfg = base.clone();
        cfg.weights = weights;
        let mut rng = crate::seed::rng(cfg.seed, "sr-init");
        let outcome = crate::train::TinySrModel::<f32>::new(&mut rng).and_then(|model| {
            crate::train::optimize_sr(&model, metric, manifest_dir, pairs, &cfg)
        });
        match outcome {
            Ok(log) => {
                let last = log
                    .iter()
                    .filter(|r| r.split == "val")
                    .next_back()
                    .expect("optimize_sr always logs validation rows");
                AblationRow {
                    label: ratio_label(&weights),
                    weights,
                    psnr: last.psnr,
                    ssim: last.ssim,
                    metric_score: last.metric_score,
                    error: None,
                }
            }
            Err(e) => AblationRow {
                label: ratio_label(&weights),
                weights,
                psnr: f64::NAN,
                ssim: f64::NAN,
                metric_score: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    });
    rows
}

/// beta/alpha label matching the usual ratio table style: integers when
/// ten times the weights are whole ("1/9"), raw floats otherwise.
pub fn ratio_label(w: &LossWeights) -> String {
    let tb = w.beta * 10.0;
    let ta = w.alpha * 10.0;
    if (tb - tb.round()).abs() < 1e-9 && (ta - ta.round()).abs() < 1e-9 {
        format!("{}/{}", tb.round() as i64, ta.round() as i64)
    } else {
        format!("{}/{}", w.beta, w.alpha)
    }
}

/// Correlation CSV: split,n,plcc,srcc.
pub fn write_correlation_csv(
    rows: &[(Split, CorrelationReport)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut text = String::from("split,n,plcc,srcc\n");
    for (split, r) in rows {
        text.push_str(&format!("{},{},{:.6},{:.6}\n", split, r.n, r.plcc, r.srcc));
    }
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(&path_str, e))
}

/// Ablation CSV: ratio,psnr,ssim,metric_score. Failed rows carry nan.
pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from("ratio,psnr,ssim,metric_score\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.label, r.psnr, r.ssim, r.metric_score
        ));
    }
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(&path_str, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pearson_perfect_linear_relations() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn pearson_direct_formula_oracle() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let y = vec![1.0, 3.0, 2.0, 4.0];
        assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_is_undefined() {
        let x = vec![1.0, 1.0, 1.0];
        let y = vec![1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&x, &y).unwrap_err(),
            Error::UndefinedCorrelation(_)
        ));
    }

    #[test]
    fn spearman_rank_examples() {
        // any strictly monotone map gives 1
        let x = vec![0.3f64, 1.1, 2.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| f64::exp(*v)).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        // frozen rank-formula oracle
        let x = vec![1.0, 2.0, 3.0];
        let y = vec![3.0, 1.0, 2.0];
        assert!((spearman(&x, &y).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn tied_values_get_averaged_ranks() {
        assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn correlations_invariant_under_positive_affine_maps() {
        let mut rng = crate::seed::rng(1, "eval-test");
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let x2: Vec<f64> = x.iter().map(|v| 3.5 * v + 11.0).collect();
        let p1 = pearson(&x, &y).unwrap();
        let p2 = pearson(&x2, &y).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
        assert_eq!(spearman(&x, &y).unwrap(), spearman(&x2, &y).unwrap());
    }

    #[test]
    fn spearman_matches_brute_force_rank_pearson() {
        let mut rng = crate::seed::rng(2, "eval-test");
        for len in [3usize, 5, 8, 10] {
            for _ in 0..20 {
                // quantized draws so ties actually occur
                let x: Vec<f64> = (0..len).map(|_| (rng.random::<f64>() * 4.0).round()).collect();
                let y: Vec<f64> = (0..len).map(|_| (rng.random::<f64>() * 4.0).round()).collect();
                let s = spearman(&x, &y);
                let oracle = pearson(&fractional_ranks(&x), &fractional_ranks(&y));
                match (s, oracle) {
                    (Ok(a), Ok(b)) => assert!((a - b).abs() < 1e-9),
                    (Err(_), Err(_)) => {}
                    (a, b) => panic!("disagreement: {:?} vs {:?}", a, b),
                }
            }
        }
    }

    #[test]
    fn oracle_stub_correlates_perfectly() {
        // a metric defined as the oracle itself must hit PLCC = SRCC = 1
        let mos = vec![1.2, 4.8, 3.3, 2.0, 4.1];
        let predicted = mos.clone();
        let r = correlation_report(&predicted, &mos).unwrap();
        assert!((r.plcc - 1.0).abs() < 1e-12);
        assert!((r.srcc - 1.0).abs() < 1e-12);
    }
}
