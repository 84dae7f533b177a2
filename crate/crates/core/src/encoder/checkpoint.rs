//! Checkpoints: a JSON index next to a file of little-endian `f32` tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{InputNorm, MultiEncoder, SingleEncoder};
use super::network::ParamSet;
use super::{EncoderConfig, EncoderError, Scalar};

pub const CHECKPOINT_FORMAT: &str = "instret-checkpoint-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data file, in floats.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub kind: CheckpointKind,
    pub config: EncoderConfig,
    pub config_hash: String,
    pub norm: InputNorm,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub slots: Option<usize>,
    pub data_file: String,
    pub data_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Identity of a loaded or saved checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub path: PathBuf,
    /// SHA-256 over the config hash and the tensor data.
    pub hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_hash(config: &EncoderConfig) -> Result<String, EncoderError> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

fn checkpoint_hash(index: &CheckpointIndex) -> String {
    sha256_hex(format!("{}:{}:{}", index.config_hash, index.data_sha256, index.labels.join(",")).as_bytes())
}

fn data_path(index_path: &Path) -> PathBuf {
    index_path.with_extension("bin")
}

fn write<F: Scalar>(
    path: &Path,
    kind: CheckpointKind,
    config: &EncoderConfig,
    norm: InputNorm,
    labels: &[String],
    slots: Option<usize>,
    params: &ParamSet<F>,
) -> Result<CheckpointInfo, EncoderError> {
    let mut bytes = Vec::with_capacity(params.len() * 4);
    let mut tensors = Vec::with_capacity(params.tensors.len());
    let mut offset = 0;
    for t in &params.tensors {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len();
        for v in &t.data {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let bin = data_path(path);
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        kind,
        config: config.clone(),
        config_hash: config_hash(config)?,
        norm,
        labels: labels.to_vec(),
        slots,
        data_file: bin
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| EncoderError::Checkpoint(format!("unusable path {}", path.display())))?
            .to_string(),
        data_sha256: sha256_hex(&bytes),
        tensors,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&bin, &bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&index)?)?;
    Ok(CheckpointInfo {
        path: path.to_path_buf(),
        hash: checkpoint_hash(&index),
    })
}

fn read_index(path: &Path) -> Result<(CheckpointIndex, Vec<f32>), EncoderError> {
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(path)?)?;
    if index.format != CHECKPOINT_FORMAT {
        return Err(EncoderError::Checkpoint(format!("unknown format {:?}", index.format)));
    }
    if index.config_hash != config_hash(&index.config)? {
        return Err(EncoderError::Checkpoint("config hash does not match the config".into()));
    }
    let bin = path.with_file_name(&index.data_file);
    let bytes = fs::read(&bin)?;
    if sha256_hex(&bytes) != index.data_sha256 {
        return Err(EncoderError::Checkpoint(format!("{} does not match its recorded hash", bin.display())));
    }
    if bytes.len() % 4 != 0 {
        return Err(EncoderError::Checkpoint("data file is not a whole number of floats".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((index, data))
}

fn fill<F: Scalar>(params: &mut ParamSet<F>, index: &CheckpointIndex, data: &[f32]) -> Result<(), EncoderError> {
    if index.tensors.len() != params.tensors.len() {
        return Err(EncoderError::Checkpoint(format!(
            "{} tensors stored, architecture has {}",
            index.tensors.len(),
            params.tensors.len()
        )));
    }
    for (entry, t) in index.tensors.iter().zip(&mut params.tensors) {
        if entry.name != t.name || entry.shape != t.shape {
            return Err(EncoderError::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                entry.name, entry.shape, t.name, t.shape
            )));
        }
        let src = data
            .get(entry.offset..entry.offset + t.data.len())
            .ok_or_else(|| EncoderError::Checkpoint(format!("tensor {} runs past the data file", entry.name)))?;
        for (dst, &v) in t.data.iter_mut().zip(src) {
            if !v.is_finite() {
                return Err(EncoderError::NonFinite(entry.name.clone()));
            }
            *dst = F::from_f64(f64::from(v));
        }
    }
    params.bump();
    Ok(())
}

/// Write `path` (JSON index) and the same path with a `.bin` extension.
pub fn save_single<F: Scalar>(path: &Path, encoder: &SingleEncoder<F>) -> Result<CheckpointInfo, EncoderError> {
    write(
        path,
        CheckpointKind::Single,
        &encoder.config,
        encoder.norm,
        &encoder.labels,
        None,
        &encoder.net.params,
    )
}

pub fn save_multi<F: Scalar>(path: &Path, encoder: &MultiEncoder<F>) -> Result<CheckpointInfo, EncoderError> {
    write(
        path,
        CheckpointKind::Multi,
        &encoder.config,
        encoder.norm,
        &[],
        Some(encoder.slots),
        &encoder.net.params,
    )
}

pub fn load_single<F: Scalar>(path: &Path) -> Result<(SingleEncoder<F>, CheckpointInfo), EncoderError> {
    let (index, data) = read_index(path)?;
    if index.kind != CheckpointKind::Single {
        return Err(EncoderError::Checkpoint(format!("{} is not a single-encoder checkpoint", path.display())));
    }
    let mut enc = SingleEncoder::zeros(index.config.clone(), index.labels.clone())?;
    fill(&mut enc.net.params, &index, &data)?;
    enc.norm = index.norm;
    Ok((
        enc,
        CheckpointInfo {
            path: path.to_path_buf(),
            hash: checkpoint_hash(&index),
        },
    ))
}

pub fn load_multi<F: Scalar>(path: &Path) -> Result<(MultiEncoder<F>, CheckpointInfo), EncoderError> {
    let (index, data) = read_index(path)?;
    let slots = match (index.kind, index.slots) {
        (CheckpointKind::Multi, Some(s)) => s,
        _ => {
            return Err(EncoderError::Checkpoint(format!("{} is not a multi-encoder checkpoint", path.display())));
        }
    };
    let mut enc = MultiEncoder::zeros(index.config.clone(), slots)?;
    fill(&mut enc.net.params, &index, &data)?;
    enc.norm = index.norm;
    Ok((
        enc,
        CheckpointInfo {
            path: path.to_path_buf(),
            hash: checkpoint_hash(&index),
        },
    ))
}
