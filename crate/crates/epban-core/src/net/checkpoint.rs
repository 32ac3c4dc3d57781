//! Checkpoint container: a one-line JSON manifest (format version,
//! architecture tag, channels, eps, named entries with dtype, shape and
//! byte offsets), a newline, then a little-endian f32 payload. Round
//! trips are bitwise for f32 models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub arch: String,
    pub channels: usize,
    pub eps: f64,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

/// Serialize named f32 parameters under an architecture tag.
pub fn save_params(
    path: impl AsRef<Path>,
    arch: &str,
    channels: usize,
    eps: f64,
    params: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params {
        entries.push(Entry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            len: t.numel() as u64,
        });
        for v in t.to_vec() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        arch: arch.to_string(),
        channels,
        eps,
        entries,
    };
    let mut bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {}", e)))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    let path_str = path.as_ref().display().to_string();
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(&path_str, e))
}

/// Parse a checkpoint, verifying version and payload length. Returns the
/// manifest and the named tensors in file order.
pub fn load_params(
    path: impl AsRef<Path>,
    expected_arch: &str,
) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let path_str = path.as_ref().display().to_string();
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path_str, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing manifest line", path_str)))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Checkpoint(format!("{}: manifest: {}", path_str, e)))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported (expected {}); nothing loaded",
            path_str, manifest.version, FORMAT_VERSION
        )));
    }
    if manifest.arch != expected_arch {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint holds a \"{}\" model, expected \"{}\"",
            path_str, manifest.arch, expected_arch
        )));
    }
    let payload = &bytes[newline + 1..];
    let expected_bytes: u64 = manifest.entries.iter().map(|e| e.len * 4).sum();
    if payload.len() as u64 != expected_bytes {
        return Err(Error::Checkpoint(format!(
            "{}: payload holds {} bytes but the manifest declares {}",
            path_str,
            payload.len(),
            expected_bytes
        )));
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{}: entry {} has dtype {}, expected f32",
                path_str, entry.name, entry.dtype
            )));
        }
        let numel: u64 = entry.shape.iter().product::<usize>() as u64;
        if numel != entry.len {
            return Err(Error::Checkpoint(format!(
                "{}: entry {} length {} disagrees with shape {:?}",
                path_str, entry.name, entry.len, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + (entry.len * 4) as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{}: entry {} extends past the payload",
                path_str, entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name.clone(), Tensor::from_vec(data, &entry.shape)?));
    }
    Ok((manifest, out))
}

/// Copy loaded tensors into a model's parameters by name. Every loaded
/// name must match a parameter and every parameter must be covered.
pub fn fill_named(
    target: &[(String, Tensor<f32>)],
    loaded: Vec<(String, Tensor<f32>)>,
    path_str: &str,
) -> Result<()> {
    let mut filled = vec![false; target.len()];
    for (name, tensor) in loaded {
        let idx = target.iter().position(|(n, _)| *n == name).ok_or_else(|| {
            Error::Checkpoint(format!("{}: unknown parameter name \"{}\"", path_str, name))
        })?;
        let (_, dst) = &target[idx];
        if dst.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} has shape {:?}, expected {:?}",
                path_str,
                name,
                tensor.shape(),
                dst.shape()
            )));
        }
        dst.set_data(tensor.to_vec())?;
        filled[idx] = true;
    }
    if let Some(pos) = filled.iter().position(|f| !f) {
        return Err(Error::Checkpoint(format!(
            "{}: parameter {} missing from checkpoint",
            path_str, target[pos].0
        )));
    }
    Ok(())
}

impl super::PbanModel<f32> {
    pub const ARCH: &'static str = "pban";

    /// Write every parameter; the round trip reproduces forwards bitwise.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_params(
            path,
            Self::ARCH,
            self.cfg.channels,
            self.cfg.eps,
            &self.named_parameters(),
        )
    }

    /// Rebuild a model from a checkpoint written by
    /// [`PbanModel::save_checkpoint`].
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let (manifest, loaded) = load_params(&path, Self::ARCH)?;
        let cfg = super::PbanConfig {
            channels: manifest.channels,
            eps: manifest.eps,
            ..super::PbanConfig::default()
        };
        let mut rng = crate::seed::rng(0, "checkpoint-init");
        let model = super::PbanModel::new(cfg, &mut rng)?;
        fill_named(&model.named_parameters(), loaded, &path_str)?;
        Ok(model)
    }
}
