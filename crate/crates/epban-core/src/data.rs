//! Desk-scale synthetic dataset: procedural reference images, degraded
//! counterparts standing in for SR reconstructions, and an oracle quality
//! score that is a fixed monotone function of SSIM.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::image::{
    degrade, gaussian_blur, read_ppm, write_ppm, DegradationRecipe, Image,
};
use crate::seed;
use crate::ssim::{ssim, SsimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split \"{}\"", other))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One training record: a degraded/reference pair with its oracle score.
#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub sr_path: String,
    pub hr_path: String,
    pub mos: f32,
    pub recipe: DegradationRecipe,
    pub split: Split,
}

pub const MANIFEST_HEADER: &str =
    "sr_path,hr_path,mos,split,blur_sigma,noise_sigma,quant_levels,down_up_factor,seed";

/// Deterministic procedural reference image: smooth gradients, band
/// limited noise, sinusoidal texture and a few soft shapes.
pub fn generate_hr(index: usize, size: usize, seed_root: u64) -> Result<Image> {
    if size % 4 != 0 || size < 12 {
        return Err(Error::InvalidArgument(format!(
            "reference size {} must be >= 12 and divisible by 4",
            size
        )));
    }
    let mut rng = seed::rng_indexed(seed_root, "hr-image", index as u64);
    let mut img = Image::new(size, size);
    let inv = 1.0 / size as f32;

    // per-channel affine gradient
    let mut grad = [[0.0f32; 3]; 3];
    for g in grad.iter_mut() {
        g[0] = rng.random::<f32>();
        g[1] = (rng.random::<f32>() - 0.5) * 1.6;
        g[2] = (rng.random::<f32>() - 0.5) * 1.6;
    }
    // two sinusoidal plaids shared across channels, per-channel amplitude
    let mut waves = Vec::new();
    for _ in 0..2 {
        let fx = rng.random_range(1.0f32..6.0);
        let fy = rng.random_range(1.0f32..6.0);
        let phase = rng.random::<f32>() * std::f32::consts::TAU;
        let amp: [f32; 3] = [
            rng.random::<f32>() * 0.25,
            rng.random::<f32>() * 0.25,
            rng.random::<f32>() * 0.25,
        ];
        waves.push((fx, fy, phase, amp));
    }
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 * inv, y as f32 * inv);
                let mut v = grad[c][0] + grad[c][1] * fx + grad[c][2] * fy;
                for (wx, wy, phase, amp) in &waves {
                    v += amp[c]
                        * (std::f32::consts::TAU * (wx * fx + wy * fy) + phase).sin();
                }
                img.set(c, y, x, v);
            }
        }
    }

    // soft-edged rectangles and disks
    let shapes = rng.random_range(3..=7);
    for _ in 0..shapes {
        let cx = rng.random::<f32>() * size as f32;
        let cy = rng.random::<f32>() * size as f32;
        let rx = rng.random_range(0.08f32..0.3) * size as f32;
        let ry = rng.random_range(0.08f32..0.3) * size as f32;
        let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let strength = rng.random_range(0.4f32..0.9);
        let disk = rng.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                let d = if disk {
                    (dx * dx + dy * dy).sqrt()
                } else {
                    dx.abs().max(dy.abs())
                };
                // soft edge over ~15% of the radius
                let m = ((1.0 - d) / 0.15).clamp(0.0, 1.0) * strength;
                if m > 0.0 {
                    for c in 0..3 {
                        let old = img.get(c, y, x);
                        img.set(c, y, x, old * (1.0 - m) + color[c] * m);
                    }
                }
            }
        }
    }

    // band-limited noise for fine texture
    let mut noise = Image::new(size, size);
    for v in noise.data_mut() {
        *v = rng.random::<f32>() - 0.5;
    }
    let noise = gaussian_blur(&noise, rng.random_range(0.6f32..1.4));
    let noise_amp = rng.random_range(0.15f32..0.35);
    for (v, n) in img.data_mut().iter_mut().zip(noise.data()) {
        *v += (n - 0.5) * noise_amp * 2.0;
    }
    img.clamp_unit();
    Ok(img)
}

/// Fixed monotone map from SSIM to the [1,5] score scale.
pub fn mos_from_ssim(s: f32) -> f32 {
    1.0 + 4.0 * s.clamp(0.0, 1.0).powf(1.5)
}

/// Oracle quality score of a degraded image against its reference.
pub fn oracle_mos(sr: &Image, hr: &Image) -> Result<f32> {
    if sr.width() != hr.width() || sr.height() != hr.height() {
        return Err(Error::ShapeMismatch {
            op: "oracle_mos",
            lhs: vec![3, sr.height(), sr.width()],
            rhs: vec![3, hr.height(), hr.width()],
        });
    }
    let s = ssim(&sr.to_tensor::<f32>(), &hr.to_tensor::<f32>(), &SsimConfig::default())?
        .to_scalar()?;
    Ok(mos_from_ssim(s))
}

fn severity_recipe(t: f64, rng: &mut ChaCha8Rng, noise_seed: u64) -> DegradationRecipe {
    let jitter = |rng: &mut ChaCha8Rng| 0.6 + 0.4 * rng.random::<f64>();
    let blur = 3.0 * t * jitter(rng);
    let noise = 0.1 * t * jitter(rng);
    // log-interpolated levels: 256 at t=0 down to 8 at t=1
    let levels = (256.0 * 2f64.powf(-5.0 * t)).round().clamp(8.0, 256.0) as u32;
    let factor = match (t * 4.0) as u32 {
        0 => 1,
        1 => 2,
        2 => 3,
        _ => 4,
    };
    DegradationRecipe {
        blur_sigma: blur as f32,
        noise_sigma: noise as f32,
        quant_levels: levels,
        down_up_factor: factor,
        seed: noise_seed,
    }
}

/// Snap to the exact values a reader of the written file will decode.
fn ppm_round_trip(img: &Image) -> Image {
    let bytes = crate::image::encode_ppm(img);
    crate::image::decode_ppm(&bytes, "in-memory").expect("self-encoded image always decodes")
}

fn split_sizes(n_refs: usize) -> Result<(usize, usize, usize)> {
    if n_refs < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 reference images for a train/val/test split, got {}",
            n_refs
        )));
    }
    let val = ((n_refs as f64) * 0.1).round().max(1.0) as usize;
    let test = val;
    Ok((n_refs - val - test, val, test))
}

fn split_of(idx: usize, sizes: (usize, usize, usize)) -> Split {
    if idx < sizes.0 {
        Split::Train
    } else if idx < sizes.0 + sizes.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generate the dataset under `out_dir` and write `manifest.csv` there.
/// Reference images never leak across splits; recipes sweep mild to
/// severe so the oracle scores cover most of the [1,5] scale. Byte
/// identical for a fixed seed regardless of parallelism.
pub fn build_dataset(
    n_refs: usize,
    variants_per_ref: usize,
    size: usize,
    seed_root: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ScoredPair>> {
    if variants_per_ref == 0 {
        return Err(Error::InvalidArgument("variants_per_ref must be positive".into()));
    }
    let sizes = split_sizes(n_refs)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    struct RefOutput {
        hr_name: String,
        hr: Image,
        variants: Vec<(String, Image, DegradationRecipe, f32)>,
    }

    let per_ref: Vec<Result<RefOutput>> = exec::map_indexed(n_refs, |i| {
        let hr_raw = generate_hr(i, size, seed_root)?;
        let hr = ppm_round_trip(&hr_raw);
        let hr_name = format!("hr_{:03}.ppm", i);
        let mut rng = seed::rng_indexed(seed_root, "recipe", i as u64);
        let mut variants = Vec::with_capacity(variants_per_ref);
        for j in 0..variants_per_ref {
            let t = if variants_per_ref > 1 {
                j as f64 / (variants_per_ref - 1) as f64
            } else {
                0.5
            };
            let noise_seed =
                seed::derive_indexed(seed_root, "degrade", ((i as u64) << 32) | j as u64);
            let recipe = severity_recipe(t, &mut rng, noise_seed);
            let sr = ppm_round_trip(&degrade(&hr, &recipe, recipe.seed)?);
            let mos = oracle_mos(&sr, &hr)?;
            variants.push((format!("sr_{:03}_{:02}.ppm", i, j), sr, recipe, mos));
        }
        Ok(RefOutput { hr_name, hr, variants })
    });

    let mut pairs = Vec::with_capacity(n_refs * variants_per_ref);
    for (i, item) in per_ref.into_iter().enumerate() {
        let item = item?;
        let split = split_of(i, sizes);
        write_ppm(&item.hr, out_dir.join(&item.hr_name))?;
        for (sr_name, sr, recipe, mos) in item.variants {
            write_ppm(&sr, out_dir.join(&sr_name))?;
            pairs.push(ScoredPair {
                sr_path: sr_name,
                hr_path: item.hr_name.clone(),
                mos,
                recipe,
                split,
            });
        }
    }
    write_manifest(&pairs, out_dir.join("manifest.csv"))?;
    Ok(pairs)
}

/// Manifest CSV: UTF-8, LF endings, header row, paths relative to the
/// manifest's directory.
pub fn write_manifest(pairs: &[ScoredPair], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for p in pairs {
        text.push_str(&format!(
            "{},{},{:.6},{},{:.6},{:.6},{},{},{}\n",
            p.sr_path,
            p.hr_path,
            p.mos,
            p.split,
            p.recipe.blur_sigma,
            p.recipe.noise_sigma,
            p.recipe.quant_levels,
            p.recipe.down_up_factor,
            p.recipe.seed,
        ));
    }
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(&path_str, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ScoredPair>> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&path_str, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Format {
                path: path_str,
                offset: 0,
                msg: format!("bad manifest header: {:?}", other),
            })
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Format {
                path: path_str,
                offset: lineno + 2,
                msg: format!("expected 9 fields, found {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Format {
            path: path_str.clone(),
            offset: lineno + 2,
            msg: format!("unparseable {}", what),
        };
        out.push(ScoredPair {
            sr_path: fields[0].to_string(),
            hr_path: fields[1].to_string(),
            mos: fields[2].parse().map_err(|_| parse_err("mos"))?,
            split: Split::parse(fields[3])?,
            recipe: DegradationRecipe {
                blur_sigma: fields[4].parse().map_err(|_| parse_err("blur_sigma"))?,
                noise_sigma: fields[5].parse().map_err(|_| parse_err("noise_sigma"))?,
                quant_levels: fields[6].parse().map_err(|_| parse_err("quant_levels"))?,
                down_up_factor: fields[7].parse().map_err(|_| parse_err("down_up_factor"))?,
                seed: fields[8].parse().map_err(|_| parse_err("seed"))?,
            },
        });
    }
    Ok(out)
}

/// Load the image pair of a manifest row, resolving relative paths
/// against the manifest's directory.
pub fn load_pair(manifest_dir: &Path, pair: &ScoredPair) -> Result<(Image, Image)> {
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            manifest_dir.join(pb)
        }
    };
    Ok((
        read_ppm(resolve(&pair.sr_path))?,
        read_ppm(resolve(&pair.hr_path))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr;

    #[test]
    fn generate_hr_is_deterministic_and_diverse() {
        let a = generate_hr(0, 48, 7).unwrap();
        let b = generate_hr(0, 48, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_hr(1, 48, 7).unwrap();
        assert!(psnr(&a, &c).unwrap() < 20.0);
    }

    #[test]
    fn generate_hr_histogram_spans_many_bins() {
        let img = generate_hr(2, 48, 7).unwrap();
        let mut bins = [false; 256];
        for &v in img.data() {
            bins[(v * 255.0).round() as usize] = true;
        }
        let occupied = bins.iter().filter(|b| **b).count();
        assert!(occupied >= 64, "only {} bins occupied", occupied);
    }

    #[test]
    fn mos_formula_anchors() {
        assert_eq!(mos_from_ssim(1.0), 5.0);
        assert_eq!(mos_from_ssim(0.0), 1.0);
        assert!((mos_from_ssim(0.7) - 3.3424).abs() < 1e-3);
        // clamping guards the slightly-negative ssim corner
        assert_eq!(mos_from_ssim(-0.2), 1.0);
    }

    #[test]
    fn identical_pair_scores_five() {
        let img = generate_hr(3, 48, 7).unwrap();
        assert_eq!(oracle_mos(&img, &img).unwrap(), 5.0);
    }

    #[test]
    fn split_sizes_follow_80_10_10() {
        assert_eq!(split_sizes(20).unwrap(), (16, 2, 2));
        assert_eq!(split_sizes(10).unwrap(), (8, 1, 1));
        assert!(split_sizes(2).is_err());
    }

    #[test]
    fn dataset_counts_splits_and_score_span() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = build_dataset(5, 6, 24, 11, dir.path()).unwrap();
        assert_eq!(pairs.len(), 30);
        let count = |s: Split| pairs.iter().filter(|p| p.split == s).count();
        assert_eq!(count(Split::Train), 18);
        assert_eq!(count(Split::Val), 6);
        assert_eq!(count(Split::Test), 6);
        for p in &pairs {
            assert!((1.0..=5.0).contains(&p.mos));
        }
        let train_mos: Vec<f32> = pairs
            .iter()
            .filter(|p| p.split == Split::Train)
            .map(|p| p.mos)
            .collect();
        let lo = train_mos.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = train_mos.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(hi - lo >= 3.0, "train span {}..{}", lo, hi);
        assert!(lo <= 1.5 && hi >= 4.8, "full span {}..{}", lo, hi);
        // no reference appears in two splits
        for a in &pairs {
            for b in &pairs {
                if a.hr_path == b.hr_path {
                    assert_eq!(a.split, b.split);
                }
            }
        }
    }

    #[test]
    fn manifests_are_reproducible_and_parse_back() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let pairs = build_dataset(4, 3, 16, 5, d1.path()).unwrap();
        build_dataset(4, 3, 16, 5, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
        let sr = std::fs::read(d1.path().join(&pairs[0].sr_path)).unwrap();
        let sr2 = std::fs::read(d2.path().join(&pairs[0].sr_path)).unwrap();
        assert_eq!(sr, sr2);

        let parsed = read_manifest(d1.path().join("manifest.csv")).unwrap();
        assert_eq!(parsed.len(), pairs.len());
        for (a, b) in parsed.iter().zip(&pairs) {
            assert_eq!(a.sr_path, b.sr_path);
            assert_eq!(a.split, b.split);
            assert!((a.mos - b.mos).abs() < 1e-5);
            assert_eq!(a.recipe.seed, b.recipe.seed);
        }
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        crate::exec::set_parallel(true);
        build_dataset(4, 2, 16, 9, d1.path()).unwrap();
        crate::exec::set_parallel(false);
        build_dataset(4, 2, 16, 9, d2.path()).unwrap();
        crate::exec::set_parallel(true);
        let m1 = std::fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn generated_files_decode_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = build_dataset(3, 2, 16, 13, dir.path()).unwrap();
        for p in &pairs {
            let (sr, hr) = load_pair(dir.path(), p).unwrap();
            assert_eq!(sr.width(), hr.width());
            let sr_file = std::fs::read(dir.path().join(&p.sr_path)).unwrap();
            assert_eq!(crate::image::encode_ppm(&sr), sr_file);
        }
    }
}
