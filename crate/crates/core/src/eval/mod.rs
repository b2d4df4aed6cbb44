//! Recall over a pooled ranked list.

mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CutInstance;
use crate::rank::RankedCutList;

pub use report::{Method, MethodRow, MetricsReport, DISTANCES, ETAS};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ranked list does not match the pool: {0}")]
    PoolMismatch(String),
    #[error("invalid metric parameter: {0}")]
    Invalid(String),
}

/// How the distance `d` bounds the offset from the cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Offsets `0..=d` count, so `d = 1` admits one snippet either side of
    /// the exact pair.
    #[default]
    Inclusive,
    /// Offsets `0..d`, so `d = 1` admits only the exact pair.
    Exclusive,
}

impl DistanceMode {
    fn max_offset(self, d: usize) -> Option<usize> {
        match self {
            DistanceMode::Inclusive => Some(d),
            DistanceMode::Exclusive => d.checked_sub(1),
        }
    }
}

/// What one retrieved positive is worth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HitMode {
    /// A cut counts once if any of its positives is retrieved; recall is
    /// hit cuts over `K`.
    #[default]
    PerCut,
    /// Retrieved positive pairs over all positive pairs.
    PairFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecallOptions {
    pub distance: DistanceMode,
    pub hits: HitMode,
}

/// Whether `(i, j)` lies within distance `d` of the cut on both sides.
pub fn is_positive(i: usize, j: usize, n_left: usize, d: usize, mode: DistanceMode) -> bool {
    match mode.max_offset(d) {
        Some(m) => i < n_left && n_left - 1 - i <= m && j <= m,
        None => false,
    }
}

/// The positive pairs of an `n_left × n_right` cut at distance `d`.
pub fn positives_at(n_left: usize, n_right: usize, d: usize, mode: DistanceMode) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n_left {
        for j in 0..n_right {
            if is_positive(i, j, n_left, d, mode) {
                out.push((i, j));
            }
        }
    }
    out
}

/// `(cut_id -> (n_left, n_right))`, rejecting duplicate ids.
fn cut_shapes(cuts: &[CutInstance]) -> Result<HashMap<usize, (usize, usize)>, EvalError> {
    let mut map = HashMap::with_capacity(cuts.len());
    for c in cuts {
        if map.insert(c.cut_id, (c.n_left(), c.n_right())).is_some() {
            return Err(EvalError::PoolMismatch(format!("duplicate cut id {}", c.cut_id)));
        }
    }
    Ok(map)
}

/// Checks that `list` holds every pair of every cut exactly once.
pub fn check_pool(list: &RankedCutList, cuts: &[CutInstance]) -> Result<(), EvalError> {
    let shapes = cut_shapes(cuts)?;
    if list.k != cuts.len() {
        return Err(EvalError::PoolMismatch(format!(
            "list reports K = {} but the corpus has {} cuts",
            list.k,
            cuts.len()
        )));
    }
    let expected: usize = cuts.iter().map(CutInstance::n_pairs).sum();
    if list.len() != expected {
        return Err(EvalError::PoolMismatch(format!(
            "list has {} pairs, pool has {expected}",
            list.len()
        )));
    }
    let mut seen: HashMap<usize, Vec<bool>> = HashMap::new();
    for c in &list.candidates {
        let &(nl, nr) = shapes
            .get(&c.cut_id)
            .ok_or_else(|| EvalError::PoolMismatch(format!("unknown cut id {}", c.cut_id)))?;
        if c.i >= nl || c.j >= nr {
            return Err(EvalError::PoolMismatch(format!(
                "pair ({}, {}) outside cut {} of shape {nl}x{nr}",
                c.i, c.j, c.cut_id
            )));
        }
        let slot = &mut seen.entry(c.cut_id).or_insert_with(|| vec![false; nl * nr])[c.i * nr + c.j];
        if *slot {
            return Err(EvalError::PoolMismatch(format!(
                "pair ({}, {}, {}) listed twice",
                c.cut_id, c.i, c.j
            )));
        }
        *slot = true;
    }
    Ok(())
}

/// Retrieval depth for `eta`, clamped to the pool with a warning.
pub fn depth(eta: usize, k: usize, pool: usize) -> usize {
    let m = eta.saturating_mul(k);
    if m > pool {
        log::warn!("eta*K = {m} exceeds the pool of {pool} pairs; using the whole pool");
        pool
    } else {
        m
    }
}

/// Recall (percent) of the top `eta·K` candidates at distance `d`.
pub fn recall_at(
    list: &RankedCutList,
    cuts: &[CutInstance],
    eta: usize,
    d: usize,
    opts: RecallOptions,
) -> Result<f64, EvalError> {
    if eta == 0 || d == 0 {
        return Err(EvalError::Invalid(format!("eta = {eta}, d = {d}; both must be >= 1")));
    }
    check_pool(list, cuts)?;
    if cuts.is_empty() {
        log::warn!("no cuts in the pool; recall is 0");
        return Ok(0.0);
    }
    let shapes = cut_shapes(cuts)?;
    let m = depth(eta, cuts.len(), list.len());
    let mut hit_cuts = std::collections::HashSet::new();
    let mut hit_pairs = 0usize;
    for c in &list.candidates[..m] {
        let (nl, _) = shapes[&c.cut_id];
        if is_positive(c.i, c.j, nl, d, opts.distance) {
            hit_cuts.insert(c.cut_id);
            hit_pairs += 1;
        }
    }
    Ok(match opts.hits {
        HitMode::PerCut => 100.0 * hit_cuts.len() as f64 / cuts.len() as f64,
        HitMode::PairFraction => {
            let total: usize = cuts
                .iter()
                .map(|c| positives_at(c.n_left(), c.n_right(), d, opts.distance).len())
                .sum();
            if total == 0 {
                0.0
            } else {
                100.0 * hit_pairs as f64 / total as f64
            }
        }
    })
}

/// Reference recall straight from a score map: materialises and sorts the
/// pool itself and tests positives with its own offset rule. Ties break by
/// `(cut_id, i, j)` ascending.
pub fn recall_oracle(
    scores: &HashMap<(usize, usize, usize), f64>,
    cuts: &[CutInstance],
    eta: usize,
    d: usize,
    opts: RecallOptions,
) -> f64 {
    if scores.is_empty() || cuts.is_empty() {
        log::warn!("empty pool; recall is 0");
        return 0.0;
    }
    let n_left: HashMap<usize, usize> = cuts.iter().map(|c| (c.cut_id, c.n_left())).collect();
    let mut pool: Vec<((usize, usize, usize), f64)> = scores.iter().map(|(k, v)| (*k, *v)).collect();
    pool.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let m = (eta * cuts.len()).min(pool.len());
    let reach = match opts.distance {
        DistanceMode::Inclusive => d as i64,
        DistanceMode::Exclusive => d as i64 - 1,
    };
    let pos = |&(c, i, j): &(usize, usize, usize)| {
        let off_l = n_left[&c] as i64 - 1 - i as i64;
        off_l >= 0 && off_l <= reach && (j as i64) <= reach
    };
    match opts.hits {
        HitMode::PerCut => {
            let mut hit = vec![];
            for (key, _) in &pool[..m] {
                if pos(key) && !hit.contains(&key.0) {
                    hit.push(key.0);
                }
            }
            100.0 * hit.len() as f64 / cuts.len().max(1) as f64
        }
        HitMode::PairFraction => {
            let total = pool.iter().filter(|(k, _)| pos(k)).count();
            let got = pool[..m].iter().filter(|(k, _)| pos(k)).count();
            100.0 * got as f64 / total.max(1) as f64
        }
    }
}
