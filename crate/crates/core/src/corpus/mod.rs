//! Scenes, shots and per-snippet feature matrices.
//!
//! A corpus stores one feature matrix per shot. Rows are snippets: windows of
//! `T` frames taken every `Δ` frames, computed inside the shot's own frame
//! range, so no snippet ever straddles a shot transition. Columns
//! `[0, modality_split)` are visual features and `[modality_split, dim)` are
//! audio features.

mod io;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

pub use io::{load_corpus, save_corpus, MANIFEST_FILE, MANIFEST_VERSION};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid window: T={frames}, delta={stride} (both must be >= 1)")]
    InvalidWindow { frames: i64, stride: i64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported manifest version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("scene {scene} shot {shot}: missing blob {path}")]
    MissingBlob {
        scene: String,
        shot: u32,
        path: String,
    },
    #[error("scene {scene} shot {shot}: feature dim {found} does not match corpus dim {expected}")]
    DimMismatch {
        scene: String,
        shot: u32,
        expected: usize,
        found: usize,
    },
    #[error("scene {scene} shot {shot}: expected {expected} snippet rows, found {found}")]
    RowCountMismatch {
        scene: String,
        shot: u32,
        expected: usize,
        found: usize,
    },
    #[error("scene {scene} shot {shot}: blob of {bytes} bytes is not a whole number of rows")]
    CorruptBlob {
        scene: String,
        shot: u32,
        bytes: usize,
    },
    #[error("scene {scene} shot {shot}: non-finite value at row {row}, column {col}")]
    NonFinite {
        scene: String,
        shot: u32,
        row: usize,
        col: usize,
    },
    #[error("scene {scene} shot {shot}: {reason}")]
    InvalidShot {
        scene: String,
        shot: u32,
        reason: String,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

/// Snippet window: `frames` (T) per snippet, one snippet every `stride` (Δ)
/// frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    #[serde(rename = "T")]
    pub frames: u32,
    #[serde(rename = "delta")]
    pub stride: u32,
}

impl Window {
    pub fn new(frames: u32, stride: u32) -> Result<Self, CorpusError> {
        if frames == 0 || stride == 0 {
            return Err(CorpusError::InvalidWindow {
                frames: frames.into(),
                stride: stride.into(),
            });
        }
        Ok(Self { frames, stride })
    }

    pub fn snippets(&self, n_frames: u64) -> usize {
        snippet_count(n_frames as i64, self.frames.into(), self.stride.into())
            .expect("window validated on construction")
    }

    /// Smallest frame count that yields `snippets` windows.
    pub fn frames_for(&self, snippets: usize) -> u64 {
        if snippets == 0 {
            return 0;
        }
        u64::from(self.frames) + (snippets as u64 - 1) * u64::from(self.stride)
    }
}

impl Default for Window {
    fn default() -> Self {
        Self {
            frames: 16,
            stride: 8,
        }
    }
}

/// Number of snippets of `frames` frames at stride `stride` that fit in a shot
/// of `n_frames` frames: `floor((N - T) / Δ) + 1`, or 0 when the shot is
/// shorter than one window.
pub fn snippet_count(n_frames: i64, frames: i64, stride: i64) -> Result<usize, CorpusError> {
    if frames <= 0 || stride <= 0 {
        return Err(CorpusError::InvalidWindow { frames, stride });
    }
    if n_frames < frames {
        return Ok(0);
    }
    Ok(((n_frames - frames) / stride + 1) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Val,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A continuous take: frames `[start_frame, end_frame)` of its scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shot {
    pub shot_id: u32,
    pub start_frame: u64,
    pub end_frame: u64,
}

impl Shot {
    pub fn n_frames(&self) -> u64 {
        self.end_frame - self.start_frame
    }

    pub fn seconds(&self, fps: f64) -> f64 {
        self.n_frames() as f64 / fps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotFeatures {
    pub shot: Shot,
    /// `n_snippets × dim`.
    pub features: Arc<Matrix<f32>>,
}

impl ShotFeatures {
    pub fn n_snippets(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub shots: Vec<ShotFeatures>,
}

/// Which column block of a feature row to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    #[serde(alias = "av")]
    Audiovisual,
}

impl Modality {
    pub fn columns(self, modality_split: usize, dim: usize) -> Range<usize> {
        match self {
            Modality::Visual => 0..modality_split,
            Modality::Audio => modality_split..dim,
            Modality::Audiovisual => 0..dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Audiovisual => "audiovisual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCorpus {
    pub dim: usize,
    pub modality_split: usize,
    pub window: Window,
    pub fps: f64,
    pub split: SplitTag,
    pub scenes: Vec<Scene>,
}

impl FeatureCorpus {
    /// Checks every structural invariant: window formula, dims, finiteness,
    /// shot ordering within scenes.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(CorpusError::Invalid(format!("fps must be > 0, got {}", self.fps)));
        }
        if self.dim == 0 {
            return Err(CorpusError::Invalid("dim must be >= 1".into()));
        }
        if self.modality_split > self.dim {
            return Err(CorpusError::Invalid(format!(
                "modality_split {} exceeds dim {}",
                self.modality_split, self.dim
            )));
        }
        Window::new(self.window.frames, self.window.stride)?;
        for scene in &self.scenes {
            let mut prev_end: Option<u64> = None;
            for sf in &scene.shots {
                let shot = sf.shot;
                let err = |reason: String| CorpusError::InvalidShot {
                    scene: scene.scene_id.clone(),
                    shot: shot.shot_id,
                    reason,
                };
                if shot.end_frame <= shot.start_frame {
                    return Err(err(format!(
                        "end_frame {} must exceed start_frame {}",
                        shot.end_frame, shot.start_frame
                    )));
                }
                if let Some(end) = prev_end {
                    if shot.start_frame < end {
                        return Err(err(format!(
                            "starts at frame {} before the previous shot ends ({end})",
                            shot.start_frame
                        )));
                    }
                }
                prev_end = Some(shot.end_frame);
                validate_matrix(&scene.scene_id, shot.shot_id, &sf.features, self.dim)?;
                let expected = self.window.snippets(shot.n_frames());
                if sf.features.rows() != expected {
                    return Err(CorpusError::RowCountMismatch {
                        scene: scene.scene_id.clone(),
                        shot: shot.shot_id,
                        expected,
                        found: sf.features.rows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn n_shots(&self) -> usize {
        self.scenes.iter().map(|s| s.shots.len()).sum()
    }

    /// Copy with every feature row scaled to unit L2 norm (zero rows stay zero).
    pub fn l2_normalized(&self) -> Self {
        self.map_features(|m| {
            let mut out = m.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
            out
        })
    }

    /// Copy with the columns of `modality` set to zero.
    pub fn zero_modality(&self, modality: Modality) -> Self {
        let cols = modality.columns(self.modality_split, self.dim);
        self.map_features(|m| {
            let mut out = m.clone();
            for i in 0..out.rows() {
                out.row_mut(i)[cols.clone()].iter_mut().for_each(|x| *x = 0.0);
            }
            out
        })
    }

    fn map_features(&self, f: impl Fn(&Matrix<f32>) -> Matrix<f32>) -> Self {
        let scenes = self
            .scenes
            .iter()
            .map(|scene| Scene {
                scene_id: scene.scene_id.clone(),
                shots: scene
                    .shots
                    .iter()
                    .map(|sf| ShotFeatures {
                        shot: sf.shot,
                        features: Arc::new(f(&sf.features)),
                    })
                    .collect(),
            })
            .collect();
        Self {
            scenes,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            dim: self.dim,
            modality_split: self.modality_split,
            window: self.window,
            fps: self.fps,
            split: self.split,
            scenes: Vec::new(),
        }
    }
}

pub(crate) fn validate_matrix(
    scene: &str,
    shot: u32,
    m: &Matrix<f32>,
    dim: usize,
) -> Result<(), CorpusError> {
    if m.cols() != dim {
        return Err(CorpusError::DimMismatch {
            scene: scene.to_owned(),
            shot,
            expected: dim,
            found: m.cols(),
        });
    }
    if let Some(pos) = m.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(CorpusError::NonFinite {
            scene: scene.to_owned(),
            shot,
            row: pos / dim.max(1),
            col: pos % dim.max(1),
        });
    }
    Ok(())
}

/// Removes shots shorter than `min_seconds`. Removing a shot leaves a gap in
/// its scene, so its former neighbours no longer form a cut.
pub fn filter_shots(corpus: &FeatureCorpus, min_seconds: f64) -> FeatureCorpus {
    let scenes = corpus
        .scenes
        .iter()
        .map(|scene| Scene {
            scene_id: scene.scene_id.clone(),
            shots: scene
                .shots
                .iter()
                .filter(|sf| sf.shot.seconds(corpus.fps) >= min_seconds)
                .cloned()
                .collect(),
        })
        .collect();
    FeatureCorpus {
        scenes,
        ..corpus.clone_header()
    }
}

/// An ordered pair of adjacent shots `(S_L, S_R)` of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CutInstance {
    pub cut_id: usize,
    pub scene_id: String,
    pub left_shot: u32,
    pub right_shot: u32,
    pub left: Arc<Matrix<f32>>,
    pub right: Arc<Matrix<f32>>,
}

impl CutInstance {
    pub fn n_left(&self) -> usize {
        self.left.rows()
    }

    pub fn n_right(&self) -> usize {
        self.right.rows()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_left() * self.n_right()
    }

    /// The ground-truth pair `(n_L - 1, 0)`.
    pub fn positive(&self) -> (usize, usize) {
        (self.n_left() - 1, 0)
    }

    /// Same cut with snippet rows stored in a different order:
    /// new row `k` of the left matrix is old row `left_order[k]`.
    pub fn permuted(&self, left_order: &[usize], right_order: &[usize]) -> Self {
        Self {
            left: Arc::new(self.left.select_rows(left_order)),
            right: Arc::new(self.right.select_rows(right_order)),
            ..self.clone()
        }
    }
}

/// One cut per pair of touching shots (`left.end_frame == right.start_frame`)
/// that both hold at least one snippet, in scene then shot order. Cut ids are
/// assigned sequentially from 0.
pub fn build_cut_instances(corpus: &FeatureCorpus) -> Vec<CutInstance> {
    let mut cuts = Vec::new();
    for scene in &corpus.scenes {
        for pair in scene.shots.windows(2) {
            let (l, r) = (&pair[0], &pair[1]);
            if l.shot.end_frame != r.shot.start_frame || l.n_snippets() == 0 || r.n_snippets() == 0
            {
                continue;
            }
            cuts.push(CutInstance {
                cut_id: cuts.len(),
                scene_id: scene.scene_id.clone(),
                left_shot: l.shot.shot_id,
                right_shot: r.shot.shot_id,
                left: Arc::clone(&l.features),
                right: Arc::clone(&r.features),
            });
        }
    }
    cuts
}

/// Total number of candidate snippet pairs over `cuts`.
pub fn pool_size(cuts: &[CutInstance]) -> usize {
    cuts.iter().map(CutInstance::n_pairs).sum()
}
