//! Model checkpoints: `checkpoint.json` plus one little-endian blob per
//! parameter tensor. Blobs hold `f32` for single-precision models and `f64`
//! for double-precision ones, so a round trip is bit-exact in either mode.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BceSides, CutModel, LossWeights, ModelConfig, NegativeSet};
use crate::artifact::{sha256_hex, write_atomic, write_json_atomic};
use crate::linalg::{Matrix, Precision, Scalar};
use crate::nn::{Activation, DenseLayer, Mlp, NnError, ParamSet};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt blob for tensor {tensor}: {reason}")]
    CorruptBlob { tensor: String, reason: String },
    #[error("checkpoint layout is inconsistent: {0}")]
    Layout(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub modality_split: usize,
    pub l1: usize,
    pub c: usize,
    pub l2: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub bce_sides: BceSides,
    pub negatives: NegativeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerLayout {
    #[serde(rename = "in")]
    in_dim: usize,
    out: usize,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    len: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    precision: Precision,
    step: u64,
    header: CheckpointHeader,
    clm: Vec<LayerLayout>,
    atm: Vec<LayerLayout>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the loss weights it was trained with and the
/// optimizer step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: CutModel<T>,
    pub weights: LossWeights,
    pub step: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn layout<T: Scalar>(mlp: &Mlp<T>) -> Vec<LayerLayout> {
    mlp.layers()
        .iter()
        .map(|l| LayerLayout {
            in_dim: l.in_dim(),
            out: l.out_dim(),
            activation: l.activation,
        })
        .collect()
}

/// Writes `ckpt` into directory `dir`. Returns the SHA-256 of the header
/// file, which covers every tensor through its per-blob hash.
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, dir: &Path) -> Result<String, CheckpointError> {
    let cfg = ckpt.model.config;
    let mut tensors = Vec::new();
    for (name, data) in ckpt.model.tensors() {
        let mut bytes = Vec::with_capacity(data.len() * T::PRECISION.byte_width());
        for &x in data {
            bytes.extend(x.to_le_bytes_vec());
        }
        let file = format!("{name}.{}", T::PRECISION.dtype());
        let path = dir.join(&file);
        write_atomic(&path, &bytes).map_err(io_err(&path))?;
        tensors.push(TensorEntry {
            name,
            file,
            len: data.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        step: ckpt.step,
        header: CheckpointHeader {
            dim: cfg.dim,
            modality_split: cfg.modality_split,
            l1: cfg.clm_layers,
            c: cfg.reduction,
            l2: cfg.atm_layers,
            lambda1: ckpt.weights.nce,
            lambda2: ckpt.weights.bce,
            bce_sides: cfg.bce_sides,
            negatives: cfg.negatives,
        },
        clm: layout(&ckpt.model.clm),
        atm: layout(&ckpt.model.atm),
        tensors,
    };
    let path = dir.join(CHECKPOINT_FILE);
    write_json_atomic(&path, &manifest).map_err(io_err(&path))?;
    let written = std::fs::read(&path).map_err(io_err(&path))?;
    Ok(sha256_hex(&written))
}

fn read_manifest(dir: &Path) -> Result<(Manifest, String), CheckpointError> {
    let path = if dir.is_dir() {
        dir.join(CHECKPOINT_FILE)
    } else {
        dir.to_path_buf()
    };
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok((manifest, sha256_hex(&bytes)))
}

/// Precision the checkpoint was saved in.
pub fn checkpoint_precision(dir: &Path) -> Result<Precision, CheckpointError> {
    Ok(read_manifest(dir)?.0.precision)
}

/// SHA-256 of the checkpoint header file.
pub fn checkpoint_hash(dir: &Path) -> Result<String, CheckpointError> {
    Ok(read_manifest(dir)?.1)
}

/// Loads a checkpoint, converting parameters to `T` when the stored
/// precision differs.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let (manifest, _) = read_manifest(dir)?;
    let base = if dir.is_dir() {
        dir
    } else {
        dir.parent().unwrap_or(Path::new("."))
    };
    let width = manifest.precision.byte_width();
    let mut values: Vec<Vec<T>> = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let path = base.join(&t.file);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let corrupt = |reason: String| CheckpointError::CorruptBlob {
            tensor: t.name.clone(),
            reason,
        };
        if bytes.len() != t.len * width {
            return Err(corrupt(format!(
                "expected {} bytes, found {}",
                t.len * width,
                bytes.len()
            )));
        }
        if sha256_hex(&bytes) != t.sha256 {
            return Err(corrupt("checksum mismatch".into()));
        }
        let v: Vec<T> = match manifest.precision {
            Precision::Single => bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_slice(c) as f64))
                .collect(),
            Precision::Double => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_slice(c)))
                .collect(),
        };
        values.push(v);
    }

    let mut tensors = values.into_iter();
    let mut names = manifest.tensors.iter().map(|t| t.name.as_str());
    let clm = build_mlp("clm", &manifest.clm, &mut tensors, &mut names)?;
    let atm = build_mlp("atm", &manifest.atm, &mut tensors, &mut names)?;
    if tensors.next().is_some() {
        return Err(CheckpointError::Layout("unexpected extra tensors".into()));
    }
    let h = &manifest.header;
    let config = ModelConfig {
        dim: h.dim,
        modality_split: h.modality_split,
        clm_layers: h.l1,
        reduction: h.c,
        atm_layers: h.l2,
        negatives: h.negatives,
        bce_sides: h.bce_sides,
    };
    if clm.in_dim() != h.dim || clm.layers().len() != h.l1 || atm.layers().len() != h.l2 {
        return Err(CheckpointError::Layout(
            "header does not match network shapes".into(),
        ));
    }
    Ok(Checkpoint {
        model: CutModel { config, clm, atm },
        weights: LossWeights {
            nce: h.lambda1,
            bce: h.lambda2,
        },
        step: manifest.step,
    })
}

fn build_mlp<'a, T: Scalar>(
    prefix: &str,
    layout: &[LayerLayout],
    tensors: &mut impl Iterator<Item = Vec<T>>,
    names: &mut impl Iterator<Item = &'a str>,
) -> Result<Mlp<T>, CheckpointError> {
    let mut layers = Vec::with_capacity(layout.len());
    for (k, l) in layout.iter().enumerate() {
        let mut take = |kind: &str, len: usize| -> Result<Vec<T>, CheckpointError> {
            let expected = format!("{prefix}.{k}.{kind}");
            match (names.next(), tensors.next()) {
                (Some(n), Some(v)) if n == expected && v.len() == len => Ok(v),
                (Some(n), _) => Err(CheckpointError::Layout(format!(
                    "expected tensor {expected} of length {len}, found {n}"
                ))),
                _ => Err(CheckpointError::Layout(format!("missing tensor {expected}"))),
            }
        };
        let weight = take("weight", l.in_dim * l.out)?;
        let bias = take("bias", l.out)?;
        layers.push(DenseLayer::new(
            Matrix::from_vec(l.out, l.in_dim, weight),
            bias,
            l.activation,
        )?);
    }
    Ok(Mlp::new(layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt<T: Scalar>() -> Checkpoint<T> {
        Checkpoint {
            model: CutModel::new(
                ModelConfig {
                    bce_sides: BceSides::Both,
                    ..ModelConfig::default()
                },
                42,
            )
            .unwrap(),
            weights: LossWeights { nce: 1.0, bce: 0.5 },
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt::<f32>();
        save_checkpoint(&c, dir.path()).unwrap();
        assert_eq!(load_checkpoint::<f32>(dir.path()).unwrap(), c);
        assert_eq!(checkpoint_precision(dir.path()).unwrap(), Precision::Single);

        let dir = tempfile::tempdir().unwrap();
        let c = ckpt::<f64>();
        save_checkpoint(&c, dir.path()).unwrap();
        assert_eq!(load_checkpoint::<f64>(dir.path()).unwrap(), c);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt::<f32>(), dir.path()).unwrap();
        let p = dir.path().join("clm.1.weight.f32");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint::<f32>(dir.path()) {
            Err(CheckpointError::CorruptBlob { tensor, .. }) => assert_eq!(tensor, "clm.1.weight"),
            other => panic!("expected corrupt blob, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt::<f32>(), dir.path()).unwrap();
        let p = dir.path().join("atm.0.bias.f32");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(CheckpointError::CorruptBlob { .. })
        ));
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt::<f32>(), dir.path()).unwrap();
        let p = dir.path().join(CHECKPOINT_FILE);
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
        v["format_version"] = 9.into();
        std::fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }
}
