//! The cut ranking model.
//!
//! A shared projection MLP (the contrastive module, CLM) maps every snippet
//! feature to a smaller space where the dot product of a left and a right
//! snippet scores the pair. A scoring head (the auxiliary module, ATM) reads
//! the projected features and predicts, per snippet, whether it is a good
//! place to cut. Neither module sees a snippet's position within its shot.

mod checkpoint;
mod loss;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CutInstance, FeatureCorpus};
use crate::linalg::{Matrix, Scalar};
use crate::nn::{init_mlp, Activation, Mlp, MlpGrads, NnError, ParamSet};

pub use checkpoint::{
    checkpoint_hash, checkpoint_precision, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CheckpointHeader, CHECKPOINT_FILE,
};
pub use loss::{bce_from_logits, bce_loss, nce_loss, BceLoss, NceLoss, NegativeSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("feature dim mismatch: model expects {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("projected width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },
}

/// Which shots contribute to the per-snippet classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BceSides {
    /// Left shot only, positive at its last snippet.
    #[default]
    Left,
    /// Adds the right shot with its first snippet positive.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the contrastive term (λ1).
    pub nce: f64,
    /// Weight of the classification term (λ2).
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nce: 1.0, bce: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.nce >= 0.0 && self.bce >= 0.0) {
            return Err(ModelError::Config(format!(
                "loss weights must be >= 0, got {} and {}",
                self.nce, self.bce
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature width H.
    pub dim: usize,
    pub modality_split: usize,
    /// Number of CLM layers (l1).
    pub clm_layers: usize,
    /// Width reduction per CLM layer (c).
    pub reduction: usize,
    /// Number of ATM layers (l2).
    pub atm_layers: usize,
    pub negatives: NegativeSet,
    pub bce_sides: BceSides,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            modality_split: 48,
            clm_layers: 2,
            reduction: 2,
            atm_layers: 1,
            negatives: NegativeSet::Disjoint,
            bce_sides: BceSides::Left,
        }
    }
}

impl ModelConfig {
    pub fn for_corpus(corpus: &FeatureCorpus) -> Self {
        Self {
            dim: corpus.dim,
            modality_split: corpus.modality_split,
            ..Self::default()
        }
    }

    /// CLM widths, input first: `H, H/c, …, H/c^l1`.
    pub fn clm_sizes(&self) -> Result<Vec<usize>, ModelError> {
        if self.clm_layers == 0 || self.atm_layers == 0 {
            return Err(ModelError::Config("l1 and l2 must be >= 1".into()));
        }
        if self.reduction == 0 {
            return Err(ModelError::Config("reduction factor must be >= 1".into()));
        }
        let mut sizes = vec![self.dim];
        for _ in 0..self.clm_layers {
            let prev = *sizes.last().unwrap();
            if prev % self.reduction != 0 || prev / self.reduction == 0 {
                return Err(ModelError::Config(format!(
                    "width {prev} is not divisible by reduction factor {}",
                    self.reduction
                )));
            }
            sizes.push(prev / self.reduction);
        }
        Ok(sizes)
    }

    /// ATM widths: `w, w/c, …` for `l2 - 1` hidden layers, then 1.
    pub fn atm_sizes(&self) -> Result<Vec<usize>, ModelError> {
        let width = *self.clm_sizes()?.last().unwrap();
        let mut sizes = vec![width];
        for _ in 1..self.atm_layers {
            let prev = *sizes.last().unwrap();
            sizes.push((prev / self.reduction).max(1));
        }
        sizes.push(1);
        Ok(sizes)
    }

    pub fn projected_width(&self) -> Result<usize, ModelError> {
        Ok(*self.clm_sizes()?.last().unwrap())
    }
}

/// Contrastive projection head plus per-snippet scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct CutModel<T> {
    pub config: ModelConfig,
    pub clm: Mlp<T>,
    pub atm: Mlp<T>,
}

/// Snippet pair similarities of one cut, `S[i][j] = ⟨F′_L[i], F′_R[j]⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrid<T> {
    pub scores: Matrix<T>,
}

impl<T: Scalar> PairGrid<T> {
    pub fn n_left(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_right(&self) -> usize {
        self.scores.cols()
    }
}

/// Plain dot products of every left/right projected snippet pair.
pub fn pair_grid<T: Scalar>(left: &Matrix<T>, right: &Matrix<T>) -> Result<PairGrid<T>, ModelError> {
    if left.cols() != right.cols() {
        return Err(ModelError::WidthMismatch {
            left: left.cols(),
            right: right.cols(),
        });
    }
    Ok(PairGrid {
        scores: left.matmul_t(right),
    })
}

/// Loss of one cut and the gradient of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CutLoss<T> {
    pub loss: T,
    pub nce: T,
    pub bce: T,
    pub grads: ModelGrads<T>,
    /// 1×1 cut: no ranking decision exists, contributes zero.
    pub degenerate: bool,
    /// The contrastive negative set was empty, so only the classification
    /// term contributed.
    pub empty_negatives: bool,
}

impl<T> CutLoss<T> {
    /// Whether this cut should be counted as a warning.
    pub fn warned(&self) -> bool {
        self.degenerate || self.empty_negatives
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub clm: MlpGrads<T>,
    pub atm: MlpGrads<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn add_assign(&mut self, other: &Self) {
        self.clm.add_assign(&other.clm);
        self.atm.add_assign(&other.atm);
    }

    pub fn scale(&mut self, s: T) {
        self.clm.scale(s);
        self.atm.scale(s);
    }
}

fn prefixed<'a, T>(prefix: &str, v: Vec<(String, &'a [T])>) -> Vec<(String, &'a [T])> {
    v.into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

impl<T: Scalar> ParamSet<T> for CutModel<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = prefixed("clm", self.clm.tensors());
        v.extend(prefixed("atm", self.atm.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.clm.tensors_mut();
        v.extend(self.atm.tensors_mut());
        v
    }
}

impl<T: Scalar> ParamSet<T> for ModelGrads<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut v = prefixed("clm", self.clm.tensors());
        v.extend(prefixed("atm", self.atm.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.clm.tensors_mut();
        v.extend(self.atm.tensors_mut());
        v
    }
}

impl<T: Scalar> CutModel<T> {
    /// Fresh model with He/Xavier initialization. The two heads use
    /// independent streams derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let clm_sizes = config.clm_sizes()?;
        let mut clm_acts = vec![Activation::Relu; config.clm_layers];
        *clm_acts.last_mut().unwrap() = Activation::None;
        let atm_sizes = config.atm_sizes()?;
        let mut atm_acts = vec![Activation::Relu; config.atm_layers];
        *atm_acts.last_mut().unwrap() = Activation::Sigmoid;
        if config.modality_split > config.dim {
            return Err(ModelError::Config("modality_split exceeds dim".into()));
        }
        Ok(Self {
            config,
            clm: init_mlp(&clm_sizes, &clm_acts, seed)?,
            atm: init_mlp(&atm_sizes, &atm_acts, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> CutModel<U> {
        CutModel {
            config: self.config,
            clm: self.clm.cast(),
            atm: self.atm.cast(),
        }
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            clm: self.clm.zero_grads(),
            atm: self.atm.zero_grads(),
        }
    }

    /// Fails with [`ModelError::DimMismatch`] when the corpus feature width
    /// differs from the model's.
    pub fn check_corpus(&self, corpus: &FeatureCorpus) -> Result<(), ModelError> {
        self.check_dim(corpus.dim)
    }

    fn check_dim(&self, found: usize) -> Result<(), ModelError> {
        if found != self.config.dim {
            return Err(ModelError::DimMismatch {
                expected: self.config.dim,
                found,
            });
        }
        Ok(())
    }

    /// Row-wise CLM projection `F → F′`.
    pub fn project(&self, features: &Matrix<f32>) -> Result<Matrix<T>, ModelError> {
        self.check_dim(features.cols())?;
        Ok(self.clm.apply(&features.cast())?)
    }

    /// Per-snippet cut probabilities from projected features.
    pub fn atm_scores(&self, projected: &Matrix<T>) -> Result<Vec<T>, ModelError> {
        Ok(self.atm.apply(projected)?.into_vec())
    }

    /// Per-snippet ATM logits; ordering by logit equals ordering by
    /// probability but avoids sigmoid saturation ties.
    pub fn atm_logits(&self, projected: &Matrix<T>) -> Result<Vec<T>, ModelError> {
        let (_, cache) = self.atm.forward(projected)?;
        Ok(cache.last_pre_activation().as_slice().to_vec())
    }

    pub fn grid(&self, cut: &CutInstance) -> Result<PairGrid<T>, ModelError> {
        pair_grid(&self.project(&cut.left)?, &self.project(&cut.right)?)
    }

    /// `λ1·NCE + λ2·BCE` for one cut with gradients for both heads. The ATM
    /// reads CLM output, so its gradient also flows into the CLM.
    pub fn total_loss(&self, cut: &CutInstance, weights: LossWeights) -> Result<CutLoss<T>, ModelError> {
        self.check_dim(cut.left.cols())?;
        self.check_dim(cut.right.cols())?;
        let (n_l, n_r) = (cut.n_left(), cut.n_right());
        if n_l == 0 || n_r == 0 {
            return Err(ModelError::Config(format!("cut {} has an empty shot", cut.cut_id)));
        }
        if n_l == 1 && n_r == 1 {
            return Ok(CutLoss {
                loss: T::ZERO,
                nce: T::ZERO,
                bce: T::ZERO,
                grads: self.zero_grads(),
                degenerate: true,
                empty_negatives: true,
            });
        }
        let lam_nce = T::from_f64(weights.nce);
        let lam_bce = T::from_f64(weights.bce);

        let (proj_l, cache_l) = self.clm.forward(&cut.left.cast())?;
        let (proj_r, cache_r) = self.clm.forward(&cut.right.cast())?;
        let grid = pair_grid(&proj_l, &proj_r)?;
        let nce = nce_loss(&grid, self.config.negatives);
        let mut d_grid = nce.grad;
        d_grid.scale(lam_nce);
        let mut d_left = d_grid.matmul(&proj_r);
        let mut d_right = d_grid.t_matmul(&proj_l);

        let mut atm_grads = self.atm.zero_grads();
        let mut bce_total = T::ZERO;
        let mut sides = vec![(&proj_l, n_l - 1, &mut d_left)];
        if self.config.bce_sides == BceSides::Both {
            sides.push((&proj_r, 0, &mut d_right));
        }
        for (proj, positive, d_proj) in sides {
            let (_, cache) = self.atm.forward(proj)?;
            let bce = bce_from_logits(cache.last_pre_activation().as_slice(), positive);
            bce_total += bce.loss;
            let mut dz = Matrix::from_vec(bce.grad.len(), 1, bce.grad);
            dz.scale(lam_bce);
            let (g, dx) = self.atm.backward_from_pre_activation(&cache, &dz)?;
            atm_grads.add_assign(&g);
            d_proj.add_assign(&dx);
        }

        let (mut clm_grads, _) = self.clm.backward(&cache_l, &d_left)?;
        let (g_right, _) = self.clm.backward(&cache_r, &d_right)?;
        clm_grads.add_assign(&g_right);

        Ok(CutLoss {
            loss: lam_nce * nce.loss + lam_bce * bce_total,
            nce: nce.loss,
            bce: bce_total,
            grads: ModelGrads {
                clm: clm_grads,
                atm: atm_grads,
            },
            degenerate: false,
            empty_negatives: nce.degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{flatten, unflatten_into, GradCheck};

    fn cut_from(left: Matrix<f32>, right: Matrix<f32>) -> CutInstance {
        CutInstance {
            cut_id: 0,
            scene_id: "s".into(),
            left_shot: 0,
            right_shot: 1,
            left: Arc::new(left),
            right: Arc::new(right),
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|k| ((k as f64 + 1.0) * (seed as f64 + 0.37) * 12.9898).sin() as f32)
                .collect(),
        )
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            modality_split: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_widths() {
        let cfg = ModelConfig {
            dim: 2560,
            modality_split: 2048,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.clm_sizes().unwrap(), vec![2560, 1280, 640]);
        assert_eq!(cfg.projected_width().unwrap(), 640);
        assert_eq!(cfg.atm_sizes().unwrap(), vec![640, 1]);
        let m = CutModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.clm.sizes(), vec![64, 32, 16]);
        assert_eq!(
            m.clm.activations(),
            vec![Activation::Relu, Activation::None]
        );
        assert_eq!(m.atm.activations(), vec![Activation::Sigmoid]);
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let cfg = ModelConfig {
            dim: 10,
            modality_split: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(CutModel::<f32>::new(cfg, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn project_edge_cases() {
        let m = CutModel::<f64>::new(small_config(), 1).unwrap();
        assert_eq!(m.project(&Matrix::zeros(0, 8)).unwrap().shape(), (0, 2));
        let row = random_matrix(1, 8, 3);
        let dup = Matrix::from_vec(2, 8, [row.as_slice(), row.as_slice()].concat());
        let p = m.project(&dup).unwrap();
        assert_eq!(p.row(0), p.row(1));
        assert!(matches!(
            m.project(&Matrix::zeros(2, 7)),
            Err(ModelError::DimMismatch { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn pair_grid_matches_entrywise_dots() {
        let l = random_matrix(3, 4, 1).cast::<f64>();
        let r = random_matrix(2, 4, 2).cast::<f64>();
        let g = pair_grid(&l, &r).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += l[(i, k)] * r[(j, k)];
                }
                assert_eq!(g.scores[(i, j)], acc);
            }
        }
        assert!(pair_grid(&l, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn pair_grid_basics() {
        let l = Matrix::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let r = Matrix::<f64>::from_rows(&[vec![0.0, 1.0], vec![0.6, 0.8]]);
        let g = pair_grid(&l, &r).unwrap();
        assert_eq!(g.scores[(0, 0)], 0.0);
        assert!((g.scores[(1, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn atm_scores_basics() {
        let mut m = CutModel::<f64>::new(small_config(), 2).unwrap();
        for t in m.atm.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let p = m.project(&random_matrix(4, 8, 5)).unwrap();
        assert_eq!(m.atm_scores(&p).unwrap(), vec![0.5; 4]);
        assert!(m.atm_scores(&Matrix::zeros(0, 2)).unwrap().is_empty());
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let m = CutModel::<f64>::new(small_config(), 3).unwrap();
        let cut = cut_from(random_matrix(3, 8, 1), random_matrix(4, 8, 2));
        let out = m.total_loss(&cut, LossWeights { nce: 0.0, bce: 0.0 }).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(flatten(&out.grads).iter().all(|&g| g == 0.0));
        assert!(out.nce > 0.0 && out.bce > 0.0);
    }

    #[test]
    fn one_by_one_cut_is_degenerate() {
        let m = CutModel::<f64>::new(small_config(), 3).unwrap();
        let cut = cut_from(random_matrix(1, 8, 1), random_matrix(1, 8, 2));
        let out = m.total_loss(&cut, LossWeights::default()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn without_auxiliary_weight_the_atm_gets_no_gradient() {
        let m = CutModel::<f64>::new(small_config(), 4).unwrap();
        let cut = cut_from(random_matrix(3, 8, 1), random_matrix(3, 8, 2));
        let out = m.total_loss(&cut, LossWeights { nce: 1.0, bce: 0.0 }).unwrap();
        assert!(flatten(&out.grads.atm).iter().all(|&g| g == 0.0));
        let nce_only = nce_loss(&m.grid(&cut).unwrap(), NegativeSet::Disjoint).loss;
        assert_eq!(out.loss, nce_only);
    }

    fn check_total_loss_gradient(config: ModelConfig, weights: LossWeights, n_l: usize, n_r: usize, seed: u64) -> f64 {
        let model = CutModel::<f64>::new(config, seed).unwrap();
        let cut = cut_from(random_matrix(n_l, config.dim, seed), random_matrix(n_r, config.dim, seed + 100));
        let params = flatten(&model);
        GradCheck::default()
            .run(
                |p| {
                    let mut m = model.clone();
                    unflatten_into(&mut m, p);
                    let out = m.total_loss(&cut, weights).unwrap();
                    (out.loss, flatten(&out.grads))
                },
                &params,
            )
            .max_rel_error
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        for (k, (nl, nr)) in [(3, 3), (2, 5), (4, 2)].into_iter().enumerate() {
            let err = check_total_loss_gradient(small_config(), LossWeights::default(), nl, nr, k as u64);
            assert!(err < 1e-4, "{nl}x{nr}: {err}");
        }
        let both = ModelConfig {
            bce_sides: BceSides::Both,
            negatives: NegativeSet::AllNonPositive,
            atm_layers: 2,
            ..small_config()
        };
        let err = check_total_loss_gradient(both, LossWeights { nce: 0.7, bce: 1.3 }, 3, 4, 9);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn projection_is_permutation_equivariant() {
        let m = CutModel::<f32>::new(ModelConfig::default(), 5).unwrap();
        let f = random_matrix(6, 64, 8);
        let order = [3, 0, 5, 1, 4, 2];
        let a = m.project(&f.select_rows(&order)).unwrap();
        let b = m.project(&f).unwrap().select_rows(&order);
        assert_eq!(a, b);
        let sa = m.atm_scores(&a).unwrap();
        let sb = m.atm_scores(&m.project(&f).unwrap()).unwrap();
        for (k, &o) in order.iter().enumerate() {
            assert_eq!(sa[k], sb[o]);
        }
    }
}
