//! On-disk corpus format: `manifest.json` plus one raw little-endian `f32`
//! blob per shot, row-major `[rows × dim]`, no header.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    validate_matrix, CorpusError, FeatureCorpus, Scene, Shot, ShotFeatures, SplitTag, Window,
};
use crate::artifact::{write_atomic, write_json_atomic};
use crate::linalg::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dim: usize,
    modality_split: usize,
    window: Window,
    fps: f64,
    #[serde(default)]
    split: SplitTag,
    scenes: Vec<ManifestScene>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestScene {
    scene_id: String,
    shots: Vec<ManifestShot>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestShot {
    shot_id: u32,
    start_frame: u64,
    end_frame: u64,
    blob: String,
    rows: usize,
    /// Per-shot feature width; defaults to the corpus dim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads and fully validates a corpus. `manifest_path` may name the manifest
/// file or the directory containing it; blob paths resolve relative to the
/// manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<FeatureCorpus, CorpusError> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusError::Version {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let window = Window::new(manifest.window.frames, manifest.window.stride)?;
    if manifest.dim == 0 {
        return Err(CorpusError::Invalid("dim must be >= 1".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for ms in manifest.scenes {
        let mut shots = Vec::with_capacity(ms.shots.len());
        for sh in ms.shots {
            let features = read_blob(base, &ms.scene_id, &sh, manifest.dim, window)?;
            shots.push(ShotFeatures {
                shot: Shot {
                    shot_id: sh.shot_id,
                    start_frame: sh.start_frame,
                    end_frame: sh.end_frame,
                },
                features: Arc::new(features),
            });
        }
        scenes.push(Scene {
            scene_id: ms.scene_id,
            shots,
        });
    }
    let corpus = FeatureCorpus {
        dim: manifest.dim,
        modality_split: manifest.modality_split,
        window,
        fps: manifest.fps,
        split: manifest.split,
        scenes,
    };
    corpus.validate()?;
    Ok(corpus)
}

fn read_blob(
    base: &Path,
    scene: &str,
    sh: &ManifestShot,
    corpus_dim: usize,
    window: Window,
) -> Result<Matrix<f32>, CorpusError> {
    if sh.end_frame <= sh.start_frame {
        return Err(CorpusError::InvalidShot {
            scene: scene.to_owned(),
            shot: sh.shot_id,
            reason: format!(
                "end_frame {} must exceed start_frame {}",
                sh.end_frame, sh.start_frame
            ),
        });
    }
    let dim = sh.dim.unwrap_or(corpus_dim);
    if dim != corpus_dim {
        return Err(CorpusError::DimMismatch {
            scene: scene.to_owned(),
            shot: sh.shot_id,
            expected: corpus_dim,
            found: dim,
        });
    }
    let expected = window.snippets(sh.end_frame - sh.start_frame);
    if sh.rows != expected {
        return Err(CorpusError::RowCountMismatch {
            scene: scene.to_owned(),
            shot: sh.shot_id,
            expected,
            found: sh.rows,
        });
    }
    let path = base.join(&sh.blob);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::MissingBlob {
                scene: scene.to_owned(),
                shot: sh.shot_id,
                path: path.display().to_string(),
            })
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    let row_bytes = 4 * dim;
    if bytes.len() % row_bytes != 0 {
        return Err(CorpusError::CorruptBlob {
            scene: scene.to_owned(),
            shot: sh.shot_id,
            bytes: bytes.len(),
        });
    }
    let found = bytes.len() / row_bytes;
    if found != sh.rows {
        return Err(CorpusError::RowCountMismatch {
            scene: scene.to_owned(),
            shot: sh.shot_id,
            expected: sh.rows,
            found,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let m = Matrix::from_vec(found, dim, values);
    validate_matrix(scene, sh.shot_id, &m, dim)?;
    Ok(m)
}

/// Writes `corpus` under `dir` (manifest plus `blobs/`). Every file is
/// written atomically.
pub fn save_corpus(corpus: &FeatureCorpus, dir: &Path) -> Result<(), CorpusError> {
    corpus.validate()?;
    let mut scenes = Vec::with_capacity(corpus.scenes.len());
    for (si, scene) in corpus.scenes.iter().enumerate() {
        let mut shots = Vec::with_capacity(scene.shots.len());
        for sf in &scene.shots {
            let blob = format!("blobs/s{si:05}_{:05}.f32", sf.shot.shot_id);
            let mut bytes = Vec::with_capacity(sf.features.as_slice().len() * 4);
            for x in sf.features.as_slice() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            let path = dir.join(&blob);
            write_atomic(&path, &bytes).map_err(io_err(&path))?;
            shots.push(ManifestShot {
                shot_id: sf.shot.shot_id,
                start_frame: sf.shot.start_frame,
                end_frame: sf.shot.end_frame,
                blob,
                rows: sf.n_snippets(),
                dim: None,
            });
        }
        scenes.push(ManifestScene {
            scene_id: scene.scene_id.clone(),
            shots,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dim: corpus.dim,
        modality_split: corpus.modality_split,
        window: corpus.window,
        fps: corpus.fps,
        split: corpus.split,
        scenes,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json_atomic(&path, &manifest).map_err(io_err(&path))
}
