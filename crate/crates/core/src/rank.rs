//! Scored candidate lists pooled over every cut of an inference set.
//!
//! Every `(cut, i, j)` snippet pair of every cut appears exactly once in a
//! [`RankedCutList`]. Lists are ordered by stage-one survival, then score
//! (descending), then `(cut_id, i, j)` ascending, so the order is total and
//! independent of thread count.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{write_atomic, write_json_atomic};
use crate::corpus::{CutInstance, Modality};
use crate::linalg::{Matrix, Scalar};
use crate::model::{CutModel, ModelError};

#[derive(Debug, Error)]
pub enum RankError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the {0} column block is empty (modality_split leaves no columns)")]
    EmptyModality(&'static str),
    #[error("retention fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ranked list {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub cut_id: usize,
    /// Left snippet index.
    pub i: usize,
    /// Right snippet index.
    pub j: usize,
    /// Higher is better.
    pub score: f64,
    /// Survived stage one (always true for single-stage methods).
    pub retained: bool,
}

impl Candidate {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.cut_id, self.i, self.j)
    }
}

/// Total order used by every ranked list.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.retained
        .cmp(&a.retained)
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.key().cmp(&b.key()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCutList {
    pub candidates: Vec<Candidate>,
    /// Number of cuts in the pool.
    pub k: usize,
}

impl RankedCutList {
    /// Sorts `candidates` into the canonical order.
    pub fn from_candidates(mut candidates: Vec<Candidate>, k: usize) -> Self {
        candidates.sort_by(candidate_order);
        Self { candidates, k }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Candidates ranked by `scores[cut]` (row `i`, column `j`), all retained.
    pub fn from_grids(cuts: &[CutInstance], grids: Vec<Matrix<f64>>) -> Self {
        let mut cands = Vec::with_capacity(grids.iter().map(|g| g.as_slice().len()).sum());
        for (cut, g) in cuts.iter().zip(&grids) {
            push_grid(&mut cands, cut.cut_id, g, None, None);
        }
        Self::from_candidates(cands, cuts.len())
    }

    /// Writes `rank,cut_id,i,j,score,stage_mask` rows (rank from 1).
    pub fn write_csv(&self, path: &Path) -> Result<(), RankError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (r, c) in self.candidates.iter().enumerate() {
            w.serialize(CsvRow {
                rank: r + 1,
                cut_id: c.cut_id,
                i: c.i,
                j: c.j,
                score: c.score,
                stage_mask: u8::from(c.retained),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| RankError::Io {
            path: path.display().to_string(),
            source: e.into_error(),
        })?;
        write_atomic(path, &bytes).map_err(|source| RankError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a list written by [`RankedCutList::write_csv`]. Rows must appear
    /// in rank order.
    pub fn read_csv(path: &Path, k: usize) -> Result<Self, RankError> {
        let fmt = |reason: String| RankError::Format {
            path: path.display().to_string(),
            reason,
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let mut candidates = Vec::new();
        for (n, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row?;
            if row.rank != n + 1 {
                return Err(fmt(format!("row {} has rank {}", n + 1, row.rank)));
            }
            if row.stage_mask > 1 {
                return Err(fmt(format!("row {} has stage_mask {}", n + 1, row.stage_mask)));
            }
            candidates.push(Candidate {
                cut_id: row.cut_id,
                i: row.i,
                j: row.j,
                score: row.score,
                retained: row.stage_mask == 1,
            });
        }
        Ok(Self { candidates, k })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    rank: usize,
    cut_id: usize,
    i: usize,
    j: usize,
    score: f64,
    stage_mask: u8,
}

fn push_grid(
    out: &mut Vec<Candidate>,
    cut_id: usize,
    grid: &Matrix<f64>,
    keep_left: Option<&[bool]>,
    keep_right: Option<&[bool]>,
) {
    for i in 0..grid.rows() {
        for j in 0..grid.cols() {
            let retained = keep_left.is_none_or(|k| k[i]) && keep_right.is_none_or(|k| k[j]);
            out.push(Candidate {
                cut_id,
                i,
                j,
                score: grid[(i, j)],
                retained,
            });
        }
    }
}

fn model_grid<T: Scalar>(model: &CutModel<T>, cut: &CutInstance) -> Result<Matrix<f64>, ModelError> {
    Ok(model.grid(cut)?.scores.map(|x| x.to_f64()))
}

/// Every pair scored by its projected dot product.
pub fn rank_single_stage<T: Scalar>(
    model: &CutModel<T>,
    cuts: &[CutInstance],
) -> Result<RankedCutList, RankError> {
    let grids = cuts
        .par_iter()
        .map(|cut| model_grid(model, cut))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RankedCutList::from_grids(cuts, grids))
}

/// `⌈fraction · n⌉`, at least 1. A small tolerance absorbs products such as
/// `0.3 · 10 = 3.0000000000000004`.
pub fn retained_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the `keep` highest scores; ties go to the lower index.
fn top_indices(scores: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &k in order.iter().take(keep) {
        mask[k] = true;
    }
    mask
}

/// Per-cut stage-one masks: the top `⌈fraction·n⌉` snippets of each shot by
/// ATM score.
pub fn stage_one_masks<T: Scalar>(
    model: &CutModel<T>,
    cut: &CutInstance,
    fraction: f64,
) -> Result<(Vec<bool>, Vec<bool>), ModelError> {
    let side = |f: &Matrix<f32>| -> Result<Vec<bool>, ModelError> {
        let proj = model.project(f)?;
        let logits: Vec<f64> = model.atm_logits(&proj)?.into_iter().map(Scalar::to_f64).collect();
        Ok(top_indices(&logits, retained_count(fraction, f.rows())))
    };
    Ok((side(&cut.left)?, side(&cut.right)?))
}

/// ATM filter then CLM ranking. Pairs that lose stage one stay in the list
/// after every surviving pair, ordered among themselves by CLM score.
pub fn rank_two_stage<T: Scalar>(
    model: &CutModel<T>,
    cuts: &[CutInstance],
    fraction: f64,
) -> Result<RankedCutList, RankError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(RankError::InvalidFraction(fraction));
    }
    let per_cut = cuts
        .par_iter()
        .map(|cut| -> Result<Vec<Candidate>, ModelError> {
            let grid = model_grid(model, cut)?;
            let (keep_l, keep_r) = stage_one_masks(model, cut, fraction)?;
            let mut v = Vec::with_capacity(cut.n_pairs());
            push_grid(&mut v, cut.cut_id, &grid, Some(&keep_l), Some(&keep_r));
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RankedCutList::from_candidates(
        per_cut.into_iter().flatten().collect(),
        cuts.len(),
    ))
}

/// Uniform `[0, 1)` score per pair, drawn in pool order from `seed`.
pub fn rank_random(cuts: &[CutInstance], seed: u64) -> RankedCutList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = cuts
        .iter()
        .map(|c| {
            let data = (0..c.n_pairs()).map(|_| rng.random::<f64>()).collect();
            Matrix::from_vec(c.n_left(), c.n_right(), data)
        })
        .collect();
    RankedCutList::from_grids(cuts, grids)
}

/// Dot products of the raw (unprojected) features restricted to one
/// modality's columns.
pub fn rank_raw(
    cuts: &[CutInstance],
    modality: Modality,
    modality_split: usize,
) -> Result<RankedCutList, RankError> {
    let dim = cuts.first().map_or(modality_split, |c| c.left.cols());
    let cols = modality.columns(modality_split, dim);
    if cols.is_empty() {
        return Err(RankError::EmptyModality(modality.as_str()));
    }
    let grids = cuts
        .par_iter()
        .map(|c| {
            let l = c.left.column_block(cols.start, cols.end).cast::<f64>();
            let r = c.right.column_block(cols.start, cols.end).cast::<f64>();
            l.matmul_t(&r)
        })
        .collect();
    Ok(RankedCutList::from_grids(cuts, grids))
}

#[derive(Debug, Serialize, Deserialize)]
struct HeatmapHeader {
    cut_id: usize,
    scene_id: String,
    left_shot: u32,
    right_shot: u32,
    n_left: usize,
    n_right: usize,
    dtype: String,
    layout: String,
    blob: String,
}

/// Writes a cut's similarity grid as `cut_<id>.f32` (row-major
/// little-endian `f32`, `n_left × n_right`) with a `cut_<id>.json` header.
pub fn export_heatmap(cut: &CutInstance, grid: &Matrix<f64>, dir: &Path) -> Result<(), RankError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| RankError::Io { path, source }
    };
    let blob = format!("cut_{:06}.f32", cut.cut_id);
    let mut bytes = Vec::with_capacity(grid.as_slice().len() * 4);
    for &x in grid.as_slice() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let blob_path = dir.join(&blob);
    write_atomic(&blob_path, &bytes).map_err(io(&blob_path))?;
    let header = HeatmapHeader {
        cut_id: cut.cut_id,
        scene_id: cut.scene_id.clone(),
        left_shot: cut.left_shot,
        right_shot: cut.right_shot,
        n_left: grid.rows(),
        n_right: grid.cols(),
        dtype: "f32".into(),
        layout: "row-major".into(),
        blob,
    };
    let header_path = dir.join(format!("cut_{:06}.json", cut.cut_id));
    write_json_atomic(&header_path, &header).map_err(io(&header_path))
}
