use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_pool, recall_at, EvalError, RecallOptions};
use crate::corpus::{pool_size, CutInstance};
use crate::rank::RankedCutList;

pub const ETAS: [usize; 3] = [1, 5, 10];
pub const DISTANCES: [usize; 3] = [1, 2, 3];

/// One ranked list to report on.
#[derive(Debug, Clone, Copy)]
pub struct Method<'a> {
    pub name: &'a str,
    pub seed: Option<u64>,
    /// Checkpoint hash of the model that produced the list.
    pub model_id: Option<&'a str>,
    pub list: &'a RankedCutList,
}

impl<'a> Method<'a> {
    pub fn new(name: &'a str, list: &'a RankedCutList) -> Self {
        Self {
            name,
            seed: None,
            model_id: None,
            list,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub seed: Option<u64>,
    pub model_id: Option<String>,
    /// `recall[eta_index][d_index]` in percent.
    pub recall: [[f64; 3]; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub pool_size: usize,
    pub options: RecallOptions,
    pub rows: Vec<MethodRow>,
}

impl MetricsReport {
    /// Evaluates each named list over the full `eta × d` grid.
    pub fn evaluate(
        methods: &[Method<'_>],
        cuts: &[CutInstance],
        options: RecallOptions,
    ) -> Result<Self, EvalError> {
        let rows = methods
            .par_iter()
            .map(|m| {
                check_pool(m.list, cuts)?;
                let mut recall = [[0.0; 3]; 3];
                for (a, &eta) in ETAS.iter().enumerate() {
                    for (b, &d) in DISTANCES.iter().enumerate() {
                        recall[a][b] = recall_at(m.list, cuts, eta, d, options)?;
                    }
                }
                Ok(MethodRow {
                    method: m.name.to_string(),
                    seed: m.seed,
                    model_id: m.model_id.map(str::to_string),
                    recall,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(Self {
            k: cuts.len(),
            pool_size: pool_size(cuts),
            options,
            rows,
        })
    }

    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,eta,d,recall_percent,K,pool_size,seed`, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,eta,d,recall_percent,K,pool_size,seed\n");
        for r in &self.rows {
            for (a, &eta) in ETAS.iter().enumerate() {
                for (b, &d) in DISTANCES.iter().enumerate() {
                    let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        out,
                        "{},{eta},{d},{:.4},{},{},{seed}",
                        r.method, r.recall[a][b], self.k, self.pool_size
                    );
                }
            }
        }
        out
    }

    /// Fixed-width table: one row per method, columns grouped by `eta`.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "method");
        for eta in ETAS {
            let _ = write!(out, " | {:^23}", format!("R@{eta}K"));
        }
        out.push('\n');
        let _ = write!(out, "{:width$}", "");
        for _ in ETAS {
            let _ = write!(out, " | {:>7}{:>8}{:>8}", "d=1", "d=2", "d=3");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:width$}", r.method);
            for cells in &r.recall {
                let _ = write!(out, " | {:>7.2}{:>8.2}{:>8.2}", cells[0], cells[1], cells[2]);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "K = {}, pool = {} pairs", self.k, self.pool_size);
        out
    }
}
