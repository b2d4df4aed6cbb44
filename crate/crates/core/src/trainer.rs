//! Mini-batch Adam training with a plateau learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_cut_instances, filter_shots, CutInstance, FeatureCorpus};
use crate::linalg::{Precision, Scalar};
use crate::model::{BceSides, CutModel, LossWeights, ModelConfig, ModelError, NegativeSet};
use crate::nn::{AdamConfig, AdamState, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} corpus has no usable cuts")]
    Empty(&'static str),
    #[error("train and val corpora differ: {0}")]
    Mismatch(String),
    #[error("non-finite {what} at epoch {epoch}, cut {cut_id}")]
    NonFinite {
        what: String,
        epoch: usize,
        cut_id: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Cuts per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub precision: Precision,
    pub clm_layers: usize,
    pub reduction: usize,
    pub atm_layers: usize,
    pub negatives: NegativeSet,
    pub bce_sides: BceSides,
    /// Shots shorter than this are dropped before cuts are formed.
    pub min_shot_seconds: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 0.003,
            plateau_factor: 0.9,
            plateau_patience: 1,
            seed: 0,
            lambda1: w.nce,
            lambda2: w.bce,
            precision: Precision::Single,
            clm_layers: m.clm_layers,
            reduction: m.reduction,
            atm_layers: m.atm_layers,
            negatives: m.negatives,
            bce_sides: m.bce_sides,
            min_shot_seconds: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience < 1 {
            return bad("plateau_patience must be >= 1".into());
        }
        self.weights().validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            nce: self.lambda1,
            bce: self.lambda2,
        }
    }

    pub fn model_config(&self, corpus: &FeatureCorpus) -> ModelConfig {
        ModelConfig {
            clm_layers: self.clm_layers,
            reduction: self.reduction,
            atm_layers: self.atm_layers,
            negatives: self.negatives,
            bce_sides: self.bce_sides,
            ..ModelConfig::for_corpus(corpus)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's cuts, each taken just before its step.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean train loss of the initial model.
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (from 1) whose model was kept.
    pub best_epoch: usize,
    /// Degenerate cuts counted once per validation pass.
    pub warnings: usize,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,lr,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.lr, e.seconds
            ));
        }
        out
    }

    /// Same records with timings zeroed, for comparisons across runs.
    pub fn without_timings(&self) -> Self {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        h
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: CutModel<T>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub mean_loss: f64,
    /// Cuts that hit the degenerate rule.
    pub warnings: usize,
}

/// Mean loss over `cuts`. Cut losses are computed in parallel and summed in
/// cut order.
pub fn validate<T: Scalar>(
    model: &CutModel<T>,
    cuts: &[CutInstance],
    weights: LossWeights,
) -> Result<Validation, ModelError> {
    let losses = cuts
        .par_iter()
        .map(|c| model.total_loss(c, weights).map(|l| (l.loss.to_f64(), l.warned())))
        .collect::<Result<Vec<_>, _>>()?;
    let warnings = losses.iter().filter(|l| l.1).count();
    if warnings > 0 {
        log::warn!("{warnings} degenerate cut(s) contributed zero loss");
    }
    let mean_loss = if cuts.is_empty() {
        0.0
    } else {
        losses.iter().map(|l| l.0).sum::<f64>() / cuts.len() as f64
    };
    Ok(Validation { mean_loss, warnings })
}

/// The generator that orders cuts each epoch.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Cuts of a corpus after the minimum shot duration filter.
pub fn training_cuts(corpus: &FeatureCorpus, min_shot_seconds: f64) -> Vec<CutInstance> {
    build_cut_instances(&filter_shots(corpus, min_shot_seconds))
}

/// Trains a fresh model on `train`, selecting the epoch with the lowest
/// validation loss.
pub fn train<T: Scalar>(
    train: &FeatureCorpus,
    val: &FeatureCorpus,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train.dim != val.dim || train.modality_split != val.modality_split {
        return Err(TrainError::Mismatch(format!(
            "dim {}/{} vs {}/{}",
            train.dim, train.modality_split, val.dim, val.modality_split
        )));
    }
    if train.window != val.window {
        return Err(TrainError::Mismatch("snippet windows differ".into()));
    }
    let train_cuts = training_cuts(train, config.min_shot_seconds);
    let val_cuts = training_cuts(val, config.min_shot_seconds);
    let model = CutModel::<T>::new(config.model_config(train), config.seed)?;
    train_on_cuts(model, &train_cuts, &val_cuts, config)
}

/// Training loop over prepared cuts, starting from `model`.
pub fn train_on_cuts<T: Scalar>(
    mut model: CutModel<T>,
    train_cuts: &[CutInstance],
    val_cuts: &[CutInstance],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_cuts.is_empty() {
        return Err(TrainError::Empty("train"));
    }
    if val_cuts.is_empty() {
        return Err(TrainError::Empty("val"));
    }
    let weights = config.weights();
    let mut adam = AdamState::new(
        &model,
        AdamConfig {
            learning_rate: config.lr,
            ..AdamConfig::default()
        },
    );
    let initial_train = validate(&model, train_cuts, weights)?;
    let initial_val = validate(&model, val_cuts, weights)?;
    log::info!(
        "initial loss: train {:.5}, val {:.5}",
        initial_train.mean_loss,
        initial_val.mean_loss
    );

    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..train_cuts.len()).collect();
    let mut lr = config.lr;
    let mut best_val = f64::INFINITY;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut warnings = initial_val.warnings;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_unstable();
            let losses = batch
                .par_iter()
                .map(|&k| model.total_loss(&train_cuts[k], weights))
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = model.zero_grads();
            for (&k, l) in batch.iter().zip(&losses) {
                let v = l.loss.to_f64();
                if !v.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "loss".into(),
                        epoch,
                        cut_id: train_cuts[k].cut_id,
                    });
                }
                loss_sum += v;
                grads.add_assign(&l.grads);
            }
            grads.scale(T::ONE / T::from_f64(batch.len() as f64));
            adam.step(&mut model, &grads).map_err(|e| match e {
                NnError::NonFiniteGradient(name) => TrainError::NonFinite {
                    what: format!("gradient in {name}"),
                    epoch,
                    cut_id: train_cuts[batch[0]].cut_id,
                },
                other => TrainError::Model(other.into()),
            })?;
        }
        let val = validate(&model, val_cuts, weights)?;
        warnings += val.warnings;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_cuts.len() as f64,
            val_loss: val.mean_loss,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5}, val {:.5}, lr {:.6}",
            record.train_loss,
            record.val_loss,
            lr
        );
        records.push(record);
        if !val.mean_loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "validation loss".into(),
                epoch,
                cut_id: val_cuts[0].cut_id,
            });
        }
        if val.mean_loss < best_val {
            best_val = val.mean_loss;
            best_model = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.plateau_patience {
                lr *= config.plateau_factor;
                adam.set_learning_rate(lr);
                stale = 0;
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        history: TrainHistory {
            initial_train_loss: initial_train.mean_loss,
            initial_val_loss: initial_val.mean_loss,
            epochs: records,
            best_epoch,
            warnings,
        },
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::ParamSet;
    use crate::synth::{generate, SynthConfig};

    fn corpora(n_scenes: usize) -> (FeatureCorpus, FeatureCorpus) {
        let cfg = SynthConfig {
            n_scenes,
            seed: 3,
            ..SynthConfig::default()
        };
        let train = generate(&cfg).unwrap().corpus;
        let val = generate(&SynthConfig {
            split: crate::corpus::SplitTag::Val,
            n_scenes: n_scenes / 2 + 1,
            ..cfg
        })
        .unwrap()
        .corpus;
        (train, val)
    }

    fn params<T: Scalar>(m: &CutModel<T>) -> Vec<f64> {
        m.tensors().iter().flat_map(|(_, t)| t.iter().map(|x| x.to_f64())).collect()
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { plateau_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"));
        let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.01}"#).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.batch_size, 8);
    }

    #[test]
    fn loss_decreases_on_planted_corpus() {
        let (train_c, val_c) = corpora(8);
        let cfg = TrainConfig { epochs: 8, ..Default::default() };
        let out = train::<f32>(&train_c, &val_c, &cfg).unwrap();
        let h = &out.history;
        assert_eq!(h.epochs.len(), 8);
        assert!(h.epochs.last().unwrap().train_loss < h.initial_train_loss);
        assert!(h.epochs[h.best_epoch - 1].val_loss < h.initial_val_loss);
    }

    #[test]
    fn same_seed_same_history() {
        let (train_c, val_c) = corpora(4);
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let a = train::<f64>(&train_c, &val_c, &cfg).unwrap();
        let b = train::<f64>(&train_c, &val_c, &cfg).unwrap();
        assert_eq!(a.history.without_timings(), b.history.without_timings());
        assert_eq!(params(&a.model), params(&b.model));
    }

    #[test]
    fn thread_count_does_not_change_training() {
        let (train_c, val_c) = corpora(4);
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let run = |n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap()
                .install(|| train::<f32>(&train_c, &val_c, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.history.without_timings(), b.history.without_timings());
        assert_eq!(params(&a.model), params(&b.model));
    }

    #[test]
    fn learning_rate_only_shrinks_by_the_factor() {
        let (train_c, val_c) = corpora(4);
        let cfg = TrainConfig { epochs: 12, lr: 0.05, ..Default::default() };
        let h = train::<f32>(&train_c, &val_c, &cfg).unwrap().history;
        let mut lr = cfg.lr;
        for e in &h.epochs {
            assert!(e.lr == lr || e.lr == lr * cfg.plateau_factor, "{} after {lr}", e.lr);
            lr = e.lr;
        }
        let best = h.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.epochs[h.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn batch_of_one_replays_per_cut_gradients() {
        let (train_c, val_c) = corpora(2);
        let cfg = TrainConfig { epochs: 1, batch_size: 1, ..Default::default() };
        let cuts = training_cuts(&train_c, cfg.min_shot_seconds);
        let vcuts = training_cuts(&val_c, cfg.min_shot_seconds);
        let init = CutModel::<f64>::new(cfg.model_config(&train_c), cfg.seed).unwrap();
        let trained = train_on_cuts(init.clone(), &cuts, &vcuts, &cfg).unwrap().model;

        let mut replay = init;
        let mut adam = AdamState::new(&replay, AdamConfig { learning_rate: cfg.lr, ..Default::default() });
        let mut order: Vec<usize> = (0..cuts.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed));
        for k in order {
            let g = replay.total_loss(&cuts[k], cfg.weights()).unwrap().grads;
            adam.step(&mut replay, &g).unwrap();
        }
        assert_eq!(params(&trained), params(&replay));
    }

    #[test]
    fn validation_is_pure() {
        let (train_c, _) = corpora(2);
        let cuts = training_cuts(&train_c, 1.0);
        let model = CutModel::<f64>::new(ModelConfig::for_corpus(&train_c), 5).unwrap();
        let before = params(&model);
        let a = validate(&model, &cuts, LossWeights::default()).unwrap();
        let b = validate(&model, &cuts, LossWeights::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, params(&model));
        let zero = validate(&model, &cuts, LossWeights { nce: 0.0, bce: 0.0 }).unwrap();
        assert_eq!(zero.mean_loss, 0.0);
    }

    #[test]
    fn one_by_one_cut_counts_a_warning() {
        let model = CutModel::<f64>::new(ModelConfig::default(), 0).unwrap();
        let cut = CutInstance {
            cut_id: 0,
            scene_id: "s".into(),
            left_shot: 0,
            right_shot: 1,
            left: Arc::new(Matrix::zeros(1, 64)),
            right: Arc::new(Matrix::zeros(1, 64)),
        };
        let v = validate(&model, &[cut], LossWeights::default()).unwrap();
        assert_eq!(v, Validation { mean_loss: 0.0, warnings: 1 });
    }

    #[test]
    fn mismatched_corpora_are_rejected() {
        let (train_c, mut val_c) = corpora(2);
        val_c.modality_split = 10;
        assert!(matches!(
            train::<f32>(&train_c, &val_c, &TrainConfig::default()),
            Err(TrainError::Mismatch(_))
        ));
        let empty = FeatureCorpus { scenes: vec![], ..train_c.clone() };
        assert!(matches!(
            train::<f32>(&empty, &train_c, &TrainConfig::default()),
            Err(TrainError::Empty("train"))
        ));
    }

    #[test]
    fn non_finite_features_abort_with_cut_id() {
        let (train_c, val_c) = corpora(2);
        let mut cuts = training_cuts(&train_c, 1.0);
        let vcuts = training_cuts(&val_c, 1.0);
        let mut left = (*cuts[1].left).clone();
        left[(0, 0)] = f32::INFINITY;
        cuts[1].left = Arc::new(left);
        let model = CutModel::<f32>::new(ModelConfig::for_corpus(&train_c), 0).unwrap();
        let err = train_on_cuts(model, &cuts, &vcuts, &TrainConfig { epochs: 1, ..Default::default() });
        match err {
            Err(TrainError::NonFinite { cut_id, epoch, .. }) => {
                assert_eq!(epoch, 1);
                assert_eq!(cut_id, cuts[1].cut_id);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
