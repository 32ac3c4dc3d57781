//! Command-line entry point binding the pipelines together.
//!
//! Exit codes: 0 success, 1 validation error (arguments, config values,
//! missing inputs), 2 runtime failure. Every run prints a header with
//! the version, seed and full effective configuration before any
//! computation, and writes its artifacts under the required --out
//! directory.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epban_core::data::{self, Split};
use epban_core::error::Error as CoreError;
use epban_core::eval;
use epban_core::gradcheck;
use epban_core::loss::{DenominatorMode, LossWeights};
use epban_core::net::PbanModel;
use epban_core::train::{self, MetricTrainConfig, SrTrainConfig, TinySrModel};

use config::Effective;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "epban",
    version,
    about = "Perceptual quality network and closed-loop SR optimization",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. A config file (flat key=value
/// lines, keys matching the long flag names with underscores) provides
/// defaults; explicit flags override it.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Directory all artifacts are written under.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; every stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Distortion-loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Perceptual-loss weight.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs_stage1: Option<usize>,
    #[arg(long)]
    epochs_stage2: Option<usize>,
    /// SR optimization epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Attention std-normalization epsilon.
    #[arg(long)]
    eps: Option<f64>,
    /// Feature channels of the metric network.
    #[arg(long)]
    channels: Option<usize>,
    /// Head dropout probability.
    #[arg(long)]
    dropout: Option<f64>,
    /// Run the combined loss exactly as written (degeneracy diagnostic);
    /// training with alpha == beta refuses under this flag.
    #[arg(long)]
    no_stopgrad: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scored dataset (images + manifest.csv).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of reference images.
        #[arg(long)]
        refs: Option<usize>,
        /// Degraded variants per reference.
        #[arg(long)]
        variants: Option<usize>,
        /// Square image size in pixels (divisible by 4).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the quality metric on a dataset manifest.
    TrainMetric {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Dataset directory containing manifest.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Correlate a trained metric against the oracle scores of a split.
    EvalMetric {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Metric checkpoint path.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train the tiny x2 upscaler against a frozen metric.
    OptimizeSr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sweep beta/alpha weight ratios, one SR training per ratio.
    AblateWeights {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated beta/alpha ratios, e.g. 1/9,5/5,9/1.
        #[arg(long, default_value = "1/9,5/5,9/1")]
        ratios: String,
    },
    /// Finite-difference gradient suite over every operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Element type: f64 (tolerance 1e-4) or f32 (diagnostic only,
        /// tolerance 1e-2).
        #[arg(long, default_value = "f64")]
        dtype: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage and parse problems are validation errors: exit 1
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CoreError> {
    std::fs::create_dir_all(out).map_err(|e| CoreError::io(out.display().to_string(), e))
}

fn run(cmd: Command) -> Result<(), CoreError> {
    match cmd {
        Command::GenData { common, refs, variants, size } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            let refs = eff.usize("refs", refs, 20)?;
            let variants = eff.usize("variants", variants, 12)?;
            let size = eff.usize("size", size, 48)?;
            eff.finish()?;
            header("gen-data", &common.out, &[
                ("seed", seed.to_string()),
                ("refs", refs.to_string()),
                ("variants", variants.to_string()),
                ("size", size.to_string()),
            ]);
            ensure_out_dir(&common.out)?;
            let pairs = data::build_dataset(refs, variants, size, seed, &common.out)?;
            println!(
                "wrote {} pairs ({} files + manifest.csv) under {}",
                pairs.len(),
                refs + pairs.len(),
                common.out.display()
            );
            Ok(())
        }

        Command::TrainMetric { common, train: flags, data: data_dir } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            let cfg = MetricTrainConfig {
                learning_rate: eff.f64("lr", flags.lr, 1e-3)?,
                batch_size: eff.usize("batch", flags.batch, 8)?,
                epochs_stage1: eff.usize("epochs_stage1", flags.epochs_stage1, 30)?,
                epochs_stage2: eff.usize("epochs_stage2", flags.epochs_stage2, 10)?,
                stage2_lr_scale: eff.f64("stage2_lr_scale", None, 0.1)?,
                seed,
                channels: eff.usize("channels", flags.channels, 16)?,
                eps: eff.f64("eps", flags.eps, 1e-8)?,
                dropout: eff.f64("dropout", flags.dropout, MetricTrainConfig::default().dropout)?,
                ..MetricTrainConfig::default()
            };
            eff.finish()?;
            header("train-metric", &common.out, &[
                ("seed", seed.to_string()),
                ("data", data_dir.display().to_string()),
                ("lr", cfg.learning_rate.to_string()),
                ("batch", cfg.batch_size.to_string()),
                ("epochs_stage1", cfg.epochs_stage1.to_string()),
                ("epochs_stage2", cfg.epochs_stage2.to_string()),
                ("stage2_lr_scale", cfg.stage2_lr_scale.to_string()),
                ("channels", cfg.channels.to_string()),
                ("eps", cfg.eps.to_string()),
                ("dropout", cfg.dropout.to_string()),
            ]);
            ensure_out_dir(&common.out)?;
            let pairs = data::read_manifest(data_dir.join("manifest.csv"))?;
            let (model, log) = train::train_metric(&data_dir, &pairs, &cfg)?;
            let ckpt = common.out.join("metric.ckpt");
            model.save_checkpoint(&ckpt)?;
            train::write_training_log(&log, common.out.join("train_log.csv"))?;
            let val = log.iter().filter(|r| r.split == "val").next_back();
            if let Some(v) = val {
                println!(
                    "final val: loss {:.4} plcc {:.4} srcc {:.4}",
                    v.loss, v.plcc, v.srcc
                );
            }
            println!("checkpoint: {}", ckpt.display());
            Ok(())
        }

        Command::EvalMetric { common, data: data_dir, checkpoint, split } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            eff.finish()?;
            let split = Split::parse(&split)?;
            header("eval-metric", &common.out, &[
                ("seed", seed.to_string()),
                ("data", data_dir.display().to_string()),
                ("checkpoint", checkpoint.display().to_string()),
                ("split", split.to_string()),
            ]);
            ensure_out_dir(&common.out)?;
            let pairs = data::read_manifest(data_dir.join("manifest.csv"))?;
            let model = PbanModel::<f32>::load_checkpoint(&checkpoint)?;
            let report = eval::eval_metric(&model, &data_dir, &pairs, split)?;
            eval::write_correlation_csv(&[(split, report)], common.out.join("correlation.csv"))?;
            println!(
                "{}: n={} plcc={:.4} srcc={:.4}",
                split, report.n, report.plcc, report.srcc
            );
            Ok(())
        }

        Command::OptimizeSr { common, train: flags, data: data_dir, checkpoint } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            let weights = LossWeights::new(
                eff.f64("alpha", flags.alpha, 0.5)?,
                eff.f64("beta", flags.beta, 0.5)?,
            )?;
            let cfg = SrTrainConfig {
                learning_rate: eff.f64("lr", flags.lr, 1e-3)?,
                batch_size: eff.usize("batch", flags.batch, 4)?,
                epochs: eff.usize("epochs", flags.epochs, 30)?,
                seed,
                weights,
                denominator_mode: if flags.no_stopgrad {
                    DenominatorMode::Literal
                } else {
                    DenominatorMode::StopGrad
                },
                ..SrTrainConfig::default()
            };
            eff.finish()?;
            header("optimize-sr", &common.out, &[
                ("seed", seed.to_string()),
                ("data", data_dir.display().to_string()),
                ("checkpoint", checkpoint.display().to_string()),
                ("alpha", weights.alpha.to_string()),
                ("beta", weights.beta.to_string()),
                ("lr", cfg.learning_rate.to_string()),
                ("batch", cfg.batch_size.to_string()),
                ("epochs", cfg.epochs.to_string()),
                ("stopgrad", (!flags.no_stopgrad).to_string()),
            ]);
            ensure_out_dir(&common.out)?;
            let pairs = data::read_manifest(data_dir.join("manifest.csv"))?;
            let mut metric = PbanModel::<f32>::load_checkpoint(&checkpoint)?;
            metric.set_trainable(false)?;
            let mut rng = epban_core::seed::rng(seed, "sr-init");
            let model = TinySrModel::<f32>::new(&mut rng)?;
            let log = train::optimize_sr(&model, &metric, &data_dir, &pairs, &cfg)?;
            model.save_checkpoint(common.out.join("sr.ckpt"))?;
            train::write_training_log(&log, common.out.join("sr_log.csv"))?;
            if let Some(v) = log.iter().filter(|r| r.split == "val").next_back() {
                println!(
                    "final val: psnr {:.4} ssim {:.4} metric {:.4}",
                    v.psnr, v.ssim, v.metric_score
                );
            }
            Ok(())
        }

        Command::AblateWeights { common, train: flags, data: data_dir, checkpoint, ratios } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            let ratio_list = parse_ratios(&ratios)?;
            let base = SrTrainConfig {
                learning_rate: eff.f64("lr", flags.lr, 1e-3)?,
                batch_size: eff.usize("batch", flags.batch, 4)?,
                epochs: eff.usize("epochs", flags.epochs, 30)?,
                seed,
                denominator_mode: if flags.no_stopgrad {
                    DenominatorMode::Literal
                } else {
                    DenominatorMode::StopGrad
                },
                ..SrTrainConfig::default()
            };
            eff.finish()?;
            header("ablate-weights", &common.out, &[
                ("seed", seed.to_string()),
                ("data", data_dir.display().to_string()),
                ("checkpoint", checkpoint.display().to_string()),
                ("ratios", ratios.clone()),
                ("lr", base.learning_rate.to_string()),
                ("batch", base.batch_size.to_string()),
                ("epochs", base.epochs.to_string()),
            ]);
            ensure_out_dir(&common.out)?;
            let pairs = data::read_manifest(data_dir.join("manifest.csv"))?;
            let mut metric = PbanModel::<f32>::load_checkpoint(&checkpoint)?;
            metric.set_trainable(false)?;
            let rows = eval::ablation_sweep(&data_dir, &pairs, &metric, &base, &ratio_list);
            eval::write_ablation_csv(&rows, common.out.join("ablation.csv"))?;
            let mut failed = 0;
            for r in &rows {
                match &r.error {
                    None => println!(
                        "ratio {}: psnr {:.4} ssim {:.4} metric {:.4}",
                        r.label, r.psnr, r.ssim, r.metric_score
                    ),
                    Some(e) => {
                        failed += 1;
                        println!("ratio {}: FAILED ({})", r.label, e);
                    }
                }
            }
            if failed == rows.len() {
                return Err(CoreError::Contract("every sweep point failed".into()));
            }
            Ok(())
        }

        Command::Gradcheck { common, dtype } => {
            let mut eff = Effective::load(&common)?;
            let seed = eff.seed(common.seed)?;
            eff.finish()?;
            let tol = match dtype.as_str() {
                "f64" => gradcheck::REL_TOL,
                "f32" => 1e-2,
                other => {
                    return Err(CoreError::InvalidArgument(format!(
                        "dtype must be f32 or f64, got {}",
                        other
                    )))
                }
            };
            header("gradcheck", &common.out, &[
                ("seed", seed.to_string()),
                ("dtype", dtype.clone()),
                ("tolerance", format!("{:e}", tol)),
            ]);
            ensure_out_dir(&common.out)?;
            // checks always run in f64 (f32 cannot meet the tolerances);
            // the dtype flag selects the pass threshold being reported
            let report = gradcheck::full_suite(seed)?;
            let mut text = String::from("op,max_rel_err,pass\n");
            let mut all_ok = true;
            println!("{:<24} {:>12}  result", "op", "max rel err");
            for row in &report.rows {
                let ok = row.max_rel_err < tol;
                all_ok &= ok;
                println!(
                    "{:<24} {:>12.3e}  {}",
                    row.op,
                    row.max_rel_err,
                    if ok { "pass" } else { "FAIL" }
                );
                text.push_str(&format!(
                    "{},{:e},{}\n",
                    row.op,
                    row.max_rel_err,
                    if ok { "pass" } else { "fail" }
                ));
            }
            std::fs::write(common.out.join("gradcheck.csv"), text)
                .map_err(|e| CoreError::io(common.out.display().to_string(), e))?;
            if all_ok {
                println!("all {} checks below {:.0e}", report.rows.len(), tol);
                Ok(())
            } else {
                Err(CoreError::Contract(format!(
                    "gradient checks exceeded the {:e} tolerance",
                    tol
                )))
            }
        }
    }
}

/// "1/9,5/5,9/1" -> LossWeights with alpha + beta normalized to 1.
fn parse_ratios(s: &str) -> Result<Vec<LossWeights>, CoreError> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let (beta_s, alpha_s) = part.trim().split_once('/').ok_or_else(|| {
            CoreError::InvalidArgument(format!("ratio \"{}\" is not of the form beta/alpha", part))
        })?;
        let beta: f64 = beta_s.trim().parse().map_err(|_| {
            CoreError::InvalidArgument(format!("unparseable ratio numerator \"{}\"", beta_s))
        })?;
        let alpha: f64 = alpha_s.trim().parse().map_err(|_| {
            CoreError::InvalidArgument(format!("unparseable ratio denominator \"{}\"", alpha_s))
        })?;
        let total = alpha + beta;
        if total <= 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "ratio \"{}\" must have a positive sum",
                part
            )));
        }
        out.push(LossWeights::new(alpha / total, beta / total)?);
    }
    if out.is_empty() {
        return Err(CoreError::InvalidArgument("empty ratio list".into()));
    }
    Ok(out)
}

/// The run header: version, seed, and every effective value.
fn header(subcommand: &str, out: &Path, kv: &[(&str, String)]) {
    let mut line = format!("epban {} | {} | out={}", VERSION, subcommand, out.display());
    for (k, v) in kv {
        line.push_str(&format!(" {}={}", k, v));
    }
    println!("{}", line);
}
