//! Contrastive and per-snippet losses on a cut's similarity grid.

use serde::{Deserialize, Serialize};

use super::PairGrid;
use crate::linalg::{sigmoid, softplus, Matrix, Scalar};

/// Which grid entries compete with the ground-truth pair `(n_L-1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// `{(i, j) : i <= n_L-2, j >= 1}`: pairs sharing the positive's row or
    /// column are left out of the loss.
    #[default]
    Disjoint,
    /// Every pair except the positive.
    AllNonPositive,
}

impl NegativeSet {
    pub fn contains(self, i: usize, j: usize, n_left: usize) -> bool {
        match self {
            NegativeSet::Disjoint => i + 1 < n_left && j >= 1,
            NegativeSet::AllNonPositive => !(i + 1 == n_left && j == 0),
        }
    }

    pub fn count(self, n_left: usize, n_right: usize) -> usize {
        match self {
            NegativeSet::Disjoint => n_left.saturating_sub(1) * n_right.saturating_sub(1),
            NegativeSet::AllNonPositive => (n_left * n_right).saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NceLoss<T> {
    pub loss: T,
    /// `∂loss/∂S`, zero outside the positive and the negative set.
    pub grad: Matrix<T>,
    /// The negative set was empty; loss and gradient are zero.
    pub degenerate: bool,
}

/// `-log(e^{s+} / (e^{s+} + Σ_neg e^{s}))` over the grid, evaluated with a
/// max-shifted log-sum-exp.
pub fn nce_loss<T: Scalar>(grid: &PairGrid<T>, negatives: NegativeSet) -> NceLoss<T> {
    let s = &grid.scores;
    let (n_l, n_r) = s.shape();
    assert!(n_l >= 1 && n_r >= 1, "grid must be non-empty");
    let mut grad = Matrix::zeros(n_l, n_r);
    if negatives.count(n_l, n_r) == 0 {
        return NceLoss {
            loss: T::ZERO,
            grad,
            degenerate: true,
        };
    }
    let pos = s[(n_l - 1, 0)];
    let mut max = pos;
    for i in 0..n_l {
        for j in 0..n_r {
            if negatives.contains(i, j, n_l) && s[(i, j)] > max {
                max = s[(i, j)];
            }
        }
    }
    let mut sum = (pos - max).exp();
    for i in 0..n_l {
        for j in 0..n_r {
            if negatives.contains(i, j, n_l) {
                let e = (s[(i, j)] - max).exp();
                grad[(i, j)] = e;
                sum += e;
            }
        }
    }
    let loss = max + sum.ln() - pos;
    grad.scale(T::ONE / sum);
    grad[(n_l - 1, 0)] = (pos - max).exp() / sum - T::ONE;
    NceLoss {
        loss,
        grad,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceLoss<T> {
    pub loss: T,
    /// `∂loss/∂logit` per snippet.
    pub grad: Vec<T>,
}

/// Mean binary cross-entropy over a shot's snippets from their logits, with
/// label 1 only at `positive`.
pub fn bce_from_logits<T: Scalar>(logits: &[T], positive: usize) -> BceLoss<T> {
    let n = logits.len();
    assert!(n >= 1 && positive < n, "bce needs a positive snippet");
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut loss = T::ZERO;
    let mut grad = Vec::with_capacity(n);
    for (i, &z) in logits.iter().enumerate() {
        let y = if i == positive { T::ONE } else { T::ZERO };
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        loss += softplus(z) - y * z;
        grad.push((sigmoid(z) - y) * inv_n);
    }
    BceLoss {
        loss: loss * inv_n,
        grad,
    }
}

/// Left-shot loss from probabilities, positive at the last snippet.
/// Probabilities must lie strictly inside (0, 1).
pub fn bce_loss<T: Scalar>(probs: &[T]) -> T {
    let logits: Vec<T> = probs.iter().map(|&p| (p / (T::ONE - p)).ln()).collect();
    bce_from_logits(&logits, probs.len() - 1).loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[Vec<f64>]) -> PairGrid<f64> {
        PairGrid {
            scores: Matrix::from_rows(rows),
        }
    }

    #[test]
    fn uniform_grid_gives_log_of_term_count() {
        let g = grid(&[vec![0.7; 3], vec![0.7; 3], vec![0.7; 3]]);
        let out = nce_loss(&g, NegativeSet::Disjoint);
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        let all = nce_loss(&g, NegativeSet::AllNonPositive);
        assert!((all.loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn excluded_entries_get_zero_gradient() {
        let g = grid(&[
            vec![0.1, -0.3, 0.8, 0.2],
            vec![1.1, 0.4, -0.6, 0.0],
            vec![0.5, 0.9, 0.3, -1.0],
        ]);
        let out = nce_loss(&g, NegativeSet::Disjoint);
        for i in 0..3 {
            for j in 0..4 {
                let excluded = (i == 2 && j >= 1) || (j == 0 && i < 2);
                if excluded {
                    assert_eq!(out.grad[(i, j)], 0.0, "({i},{j})");
                } else {
                    assert_ne!(out.grad[(i, j)], 0.0, "({i},{j})");
                }
            }
        }
        // softmax gradient sums to zero
        assert!(out.grad.as_slice().iter().sum::<f64>().abs() < 1e-14);
        assert!(out.grad[(2, 0)] < 0.0);
    }

    #[test]
    fn loss_vanishes_as_positive_dominates() {
        let mut prev = f64::INFINITY;
        for s in [0.0, 2.0, 5.0, 10.0, 40.0] {
            let g = grid(&[vec![0.0, 0.0], vec![s, 0.0]]);
            let l = nce_loss(&g, NegativeSet::Disjoint).loss;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn matches_direct_exponential_sum() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|j| ((i * 5 + j) as f64 * 1.37).sin() * 2.0).collect())
            .collect();
        let g = grid(&rows);
        let pos = rows[3][0].exp();
        let mut neg = 0.0;
        for r in rows.iter().take(3) {
            for &v in r.iter().skip(1) {
                neg += v.exp();
            }
        }
        let direct = -(pos / (pos + neg)).ln();
        let out = nce_loss(&g, NegativeSet::Disjoint);
        assert!((out.loss - direct).abs() < 1e-12, "{} vs {direct}", out.loss);
    }

    #[test]
    fn huge_scores_stay_finite() {
        let g = grid(&[vec![900.0, 1000.0], vec![950.0, -900.0]]);
        let out = nce_loss(&g, NegativeSet::Disjoint);
        assert!((out.loss - 50.0).abs() < 1e-9);
        assert!(out.grad.all_finite());
    }

    #[test]
    fn one_by_one_is_degenerate() {
        let out = nce_loss(&grid(&[vec![3.0]]), NegativeSet::AllNonPositive);
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
        let out = nce_loss(&grid(&[vec![3.0, 1.0]]), NegativeSet::Disjoint);
        assert!(out.degenerate, "single left snippet leaves no disjoint negatives");
    }

    #[test]
    fn bce_uniform_is_ln2() {
        for n in [1, 2, 7] {
            let l = bce_loss(&vec![0.5f64; n]);
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_vanishes_for_confident_correct_scores() {
        let l = bce_from_logits(&[-40.0f64, -40.0, 40.0], 2);
        assert!(l.loss < 1e-15);
        let wrong = bce_from_logits(&[40.0f64, -40.0, -40.0], 2);
        assert!(wrong.loss > 20.0);
    }
}
