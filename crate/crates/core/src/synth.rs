//! Synthetic corpora with planted cut signals, and reference values for
//! random and perfect scorers.
//!
//! Each snippet row is
//!
//! ```text
//! x = noise + nuisance + σ_m·u·[cut-side snippet] + σ_c·m_cut·[cut-side snippet]
//! ```
//!
//! where `u` is one fixed marker direction and `m_cut` a random match code per
//! cut. Snippets away from a cut instead carry a random content code from the
//! same subspace as the match codes. The nuisance is a large per-snippet
//! component confined to a fixed low-dimensional subspace; it swamps raw dot
//! products but a learned projection can drop it. Marker, nuisance subspace
//! and match subspace are mutually orthogonal.
//!
//! Scenes default to two shots. In longer scenes a middle shot carries the
//! marker at both ends, so its first snippet looks like a cut point while the
//! classification target says otherwise.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_cut_instances, CutInstance, FeatureCorpus, Scene, Shot, ShotFeatures, SplitTag, Window};
use crate::eval::{is_positive, recall_at, RecallOptions};
use crate::linalg::Matrix;
use crate::rank::{Candidate, RankedCutList};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// Inclusive range.
    pub shots_per_scene: [usize; 2],
    /// Inclusive range, lower bound at least 2.
    pub snippets_per_shot: [usize; 2],
    pub dim: usize,
    pub modality_split: usize,
    pub marker_strength: f64,
    pub match_strength: f64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise_scale: f64,
    /// Dimension of the nuisance subspace.
    pub nuisance_dims: usize,
    /// Per-coordinate standard deviation of the nuisance.
    pub nuisance_scale: f64,
    /// Dimension of the subspace match codes are drawn from.
    pub match_dims: usize,
    /// Length of the random code from the match subspace carried by every
    /// snippet that is not next to a cut. Such snippets look like cut
    /// candidates to a pairwise scorer but carry no marker.
    pub content_strength: f64,
    pub window: Window,
    pub fps: f64,
    pub split: SplitTag,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            shots_per_scene: [2, 2],
            snippets_per_shot: [4, 12],
            dim: 64,
            modality_split: 48,
            marker_strength: 2.0,
            match_strength: 3.0,
            noise_scale: 0.1,
            nuisance_dims: 4,
            nuisance_scale: 1.5,
            match_dims: 12,
            content_strength: 2.0,
            window: Window::default(),
            fps: 24.0,
            split: SplitTag::Train,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let [s_lo, s_hi] = self.shots_per_scene;
        let [n_lo, n_hi] = self.snippets_per_shot;
        if n_lo < 2 {
            return bad(format!(
                "snippets_per_shot must be >= 2, got {n_lo} (a one-snippet shot has no negatives)"
            ));
        }
        if s_lo < 1 || s_lo > s_hi || n_lo > n_hi {
            return bad(format!("empty range in shots {s_lo}..={s_hi} or snippets {n_lo}..={n_hi}"));
        }
        if self.dim == 0 || self.modality_split > self.dim {
            return bad(format!("dim {} / modality_split {}", self.dim, self.modality_split));
        }
        if self.match_dims == 0 || 1 + self.nuisance_dims + self.match_dims > self.dim {
            return bad(format!(
                "1 + nuisance_dims + match_dims = {} must be <= dim = {} with match_dims >= 1",
                1 + self.nuisance_dims + self.match_dims,
                self.dim
            ));
        }
        for (name, v) in [
            ("marker_strength", self.marker_strength),
            ("match_strength", self.match_strength),
            ("noise_scale", self.noise_scale),
            ("nuisance_scale", self.nuisance_scale),
            ("content_strength", self.content_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.fps > 0.0) || self.window.frames == 0 || self.window.stride == 0 {
            return bad("fps and window must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth for one cut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthCut {
    pub cut_id: usize,
    pub scene_id: String,
    pub left_shot: u32,
    pub right_shot: u32,
    pub left_len: usize,
    pub right_len: usize,
    /// Always `(left_len - 1, 0)`.
    pub positive: (usize, usize),
}

/// The directions used to build the features, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    pub marker: Vec<f64>,
    /// Orthonormal rows spanning the nuisance subspace.
    pub nuisance_basis: Vec<Vec<f64>>,
    /// One unit vector per cut, indexed by cut id.
    pub match_codes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub corpus: FeatureCorpus,
    pub ground_truth: Vec<GroundTruthCut>,
    pub planted: Planted,
}

const WORLD_STREAM: u64 = 0;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn scene_stream(split: SplitTag, index: usize) -> u64 {
    let tag = match split {
        SplitTag::Train => 1u64,
        SplitTag::Val => 2,
    };
    (tag << 32) | index as u64
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt applied twice).
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

struct World {
    marker: Vec<f64>,
    nuisance: Vec<Vec<f64>>,
    matches: Vec<Vec<f64>>,
}

impl World {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, WORLD_STREAM);
        let mut basis = orthonormal(&mut rng, 1 + cfg.nuisance_dims + cfg.match_dims, cfg.dim);
        let matches = basis.split_off(1 + cfg.nuisance_dims);
        let nuisance = basis.split_off(1);
        Self {
            marker: basis.pop().unwrap(),
            nuisance,
            matches,
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Uniformly random unit vector in the span of `basis`.
fn random_code(rng: &mut ChaCha8Rng, basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let g = gaussian(rng, basis.len());
    let mut code = vec![0.0; dim];
    for (c, b) in g.iter().zip(basis) {
        axpy(&mut code, *c, b);
    }
    normalize(&mut code);
    code
}

fn gen_scene(cfg: &SynthConfig, world: &World, index: usize) -> (Scene, Vec<Vec<f64>>) {
    let mut rng = stream_rng(cfg.seed, scene_stream(cfg.split, index));
    let n_shots = rng.random_range(cfg.shots_per_scene[0]..=cfg.shots_per_scene[1]);
    let lens: Vec<usize> = (0..n_shots)
        .map(|_| rng.random_range(cfg.snippets_per_shot[0]..=cfg.snippets_per_shot[1]))
        .collect();
    let codes: Vec<Vec<f64>> = (1..n_shots)
        .map(|_| random_code(&mut rng, &world.matches, cfg.dim))
        .collect();

    let mut shots = Vec::with_capacity(n_shots);
    let mut cursor = 0u64;
    for (s, &n) in lens.iter().enumerate() {
        let mut data = Vec::with_capacity(n * cfg.dim);
        for t in 0..n {
            let mut x: Vec<f64> = gaussian(&mut rng, cfg.dim).into_iter().map(|z| z * cfg.noise_scale).collect();
            let jitter = gaussian(&mut rng, cfg.nuisance_dims);
            for (k, b) in world.nuisance.iter().enumerate() {
                axpy(&mut x, cfg.nuisance_scale * jitter[k], b);
            }
            let mut plant = |code: &[f64]| {
                axpy(&mut x, cfg.marker_strength, &world.marker);
                axpy(&mut x, cfg.match_strength, code);
            };
            let content = random_code(&mut rng, &world.matches, cfg.dim);
            let mut planted = false;
            if t == n - 1 && s + 1 < n_shots {
                plant(&codes[s]);
                planted = true;
            }
            if t == 0 && s > 0 {
                plant(&codes[s - 1]);
                planted = true;
            }
            if !planted {
                axpy(&mut x, cfg.content_strength, &content);
            }
            data.extend(x.into_iter().map(|v| v as f32));
        }
        let frames = cfg.window.frames_for(n);
        shots.push(ShotFeatures {
            shot: Shot {
                shot_id: s as u32,
                start_frame: cursor,
                end_frame: cursor + frames,
            },
            features: Arc::new(Matrix::from_vec(n, cfg.dim, data)),
        });
        cursor += frames;
    }
    let scene = Scene {
        scene_id: format!("{}_{index:04}", cfg.split),
        shots,
    };
    (scene, codes)
}

/// Builds a corpus of `config.n_scenes` scenes for `config.split`. Scenes
/// draw from independent random streams, so the output does not depend on
/// the thread count. Directions are shared by every split with the same
/// seed.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let world = World::new(config);
    let generated: Vec<(Scene, Vec<Vec<f64>>)> = (0..config.n_scenes)
        .into_par_iter()
        .map(|i| gen_scene(config, &world, i))
        .collect();
    let mut scenes = Vec::with_capacity(generated.len());
    let mut match_codes = Vec::new();
    for (scene, codes) in generated {
        scenes.push(scene);
        match_codes.extend(codes);
    }
    let corpus = FeatureCorpus {
        dim: config.dim,
        modality_split: config.modality_split,
        window: config.window,
        fps: config.fps,
        split: config.split,
        scenes,
    };
    let ground_truth = ground_truth(&build_cut_instances(&corpus));
    debug_assert_eq!(ground_truth.len(), match_codes.len());
    Ok(SynthOutput {
        corpus,
        ground_truth,
        planted: Planted {
            marker: world.marker,
            nuisance_basis: world.nuisance,
            match_codes,
        },
    })
}

pub fn ground_truth(cuts: &[CutInstance]) -> Vec<GroundTruthCut> {
    cuts.iter()
        .map(|c| GroundTruthCut {
            cut_id: c.cut_id,
            scene_id: c.scene_id.clone(),
            left_shot: c.left_shot,
            right_shot: c.right_shot,
            left_len: c.n_left(),
            right_len: c.n_right(),
            positive: c.positive(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Percent.
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Expected recall of a uniform random scorer, by Monte Carlo. A uniform
/// scoring retrieves a uniformly random `eta·K`-subset of the pool, so each
/// trial samples that subset directly.
pub fn random_recall_expectation(
    corpus: &FeatureCorpus,
    eta: usize,
    d: usize,
    trials: usize,
    seed: u64,
    opts: RecallOptions,
) -> Estimate {
    random_recall_for_cuts(&build_cut_instances(corpus), eta, d, trials, seed, opts)
}

pub fn random_recall_for_cuts(
    cuts: &[CutInstance],
    eta: usize,
    d: usize,
    trials: usize,
    seed: u64,
    opts: RecallOptions,
) -> Estimate {
    assert!(trials >= 1, "trials must be >= 1");
    // (cut index, positive?) for every pair of the pool
    let mut pool = Vec::new();
    let mut n_pos = 0usize;
    for (c, cut) in cuts.iter().enumerate() {
        for i in 0..cut.n_left() {
            for j in 0..cut.n_right() {
                let p = is_positive(i, j, cut.n_left(), d, opts.distance);
                n_pos += usize::from(p);
                pool.push((c, p));
            }
        }
    }
    if cuts.is_empty() || pool.is_empty() {
        return Estimate { mean: 0.0, std_error: 0.0, trials };
    }
    let m = (eta * cuts.len()).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hit = vec![false; cuts.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        hit.iter_mut().for_each(|h| *h = false);
        let mut pairs = 0usize;
        for k in sample(&mut rng, pool.len(), m) {
            let (c, p) = pool[k];
            if p {
                hit[c] = true;
                pairs += 1;
            }
        }
        let r = match opts.hits {
            crate::eval::HitMode::PerCut => 100.0 * hit.iter().filter(|&&h| h).count() as f64 / cuts.len() as f64,
            crate::eval::HitMode::PairFraction => 100.0 * pairs as f64 / n_pos.max(1) as f64,
        };
        sum += r;
        sum_sq += r * r;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = if trials > 1 { (sum_sq - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
    Estimate {
        mean,
        std_error: (var / n).sqrt(),
        trials,
    }
}

/// Closed form of the per-cut random expectation: a cut with `p` positives
/// in a pool of `P` is missed by a random `m`-subset with probability
/// `C(P-p, m) / C(P, m)`.
pub fn random_recall_exact(cuts: &[CutInstance], eta: usize, d: usize, opts: RecallOptions) -> f64 {
    let pool: usize = cuts.iter().map(CutInstance::n_pairs).sum();
    if cuts.is_empty() || pool == 0 {
        return 0.0;
    }
    let m = (eta * cuts.len()).min(pool);
    let total: f64 = cuts
        .iter()
        .map(|c| {
            let p = (0..c.n_left())
                .flat_map(|i| (0..c.n_right()).map(move |j| (i, j)))
                .filter(|&(i, j)| is_positive(i, j, c.n_left(), d, opts.distance))
                .count();
            let mut miss = 1.0;
            for t in 0..m {
                if pool - t < p + 1 && p > 0 {
                    miss = 0.0;
                    break;
                }
                miss *= (pool - p - t) as f64 / (pool - t) as f64;
            }
            1.0 - miss
        })
        .sum();
    100.0 * total / cuts.len() as f64
}

/// Recall of a scorer that puts each cut's ground-truth pair first, other
/// positives next and everything else last.
pub fn best_case_recall(
    corpus: &FeatureCorpus,
    ground_truth: &[GroundTruthCut],
    eta: usize,
    d: usize,
    opts: RecallOptions,
) -> f64 {
    let cuts = build_cut_instances(corpus);
    if cuts.is_empty() {
        log::warn!("best-case recall of an empty corpus is 0");
        return 0.0;
    }
    let truth: HashMap<usize, (usize, usize)> = ground_truth.iter().map(|g| (g.cut_id, g.positive)).collect();
    let mut cands = Vec::new();
    for c in &cuts {
        let gt = truth.get(&c.cut_id).copied().unwrap_or_else(|| c.positive());
        for i in 0..c.n_left() {
            for j in 0..c.n_right() {
                let score = if (i, j) == gt {
                    2.0
                } else if is_positive(i, j, c.n_left(), d, opts.distance) {
                    1.0
                } else {
                    0.0
                };
                cands.push(Candidate { cut_id: c.cut_id, i, j, score, retained: true });
            }
        }
    }
    let list = RankedCutList::from_candidates(cands, cuts.len());
    recall_at(&list, &cuts, eta, d, opts).unwrap_or(0.0)
}
