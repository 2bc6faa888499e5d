//! Per-head minimum-threshold prediction.
//!
//! Each head starts at `t_init` and may be reduced by 10% any number of times.
//! `D[h][m]` is the best performance reachable with exactly `m` reductions
//! spread over heads `0..h`; the answer is the largest `m` whose best state
//! stays within `epsilon` of the unreduced baseline.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{full_attention, AttentionInputs};
use crate::error::{Error, Result};
use crate::scoring::SelectionConfig;
use crate::selection::{block_prob_rows, density, mask_from_probs};
use crate::sparse::{output_error, sparse_attention};
use crate::tensor::Tensor;

/// Multiplier applied per reduction step.
pub const DECAY: f64 = 0.9;

pub const DEFAULT_EPSILON: f64 = 0.01;

pub fn reduced_threshold(t_init: f64, steps: u32) -> f64 {
    t_init * DECAY.powi(steps as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadThresholds {
    pub thresholds: Vec<f64>,
    pub step_counts: Vec<u32>,
}

impl HeadThresholds {
    pub fn from_steps(t_init: f64, step_counts: Vec<u32>) -> Self {
        HeadThresholds {
            thresholds: step_counts.iter().map(|&s| reduced_threshold(t_init, s)).collect(),
            step_counts,
        }
    }

    pub fn mean(&self) -> f64 {
        self.thresholds.iter().sum::<f64>() / self.thresholds.len() as f64
    }
}

/// Filled DP table. `steps[h][m]` is the reduction vector of the state
/// achieving `perf[h][m]`; `choice[h][m]` is how many of those steps went to
/// head `h - 1` (0 means the row above was carried down).
#[derive(Debug, Clone)]
pub struct DpState {
    pub t_init: f64,
    pub budget: usize,
    pub perf: Vec<Vec<f64>>,
    pub choice: Vec<Vec<Option<usize>>>,
    steps: Vec<Vec<Option<Vec<u32>>>>,
}

impl DpState {
    pub fn heads(&self) -> usize {
        self.perf.len() - 1
    }

    /// Reduction counts of state `(h, m)`, rebuilt from `choice`.
    pub fn backtrack(&self, h: usize, m: usize) -> Option<Vec<u32>> {
        let mut counts = vec![0u32; self.heads()];
        let mut m = m;
        for row in (1..=h).rev() {
            let s = self.choice[row][m]?;
            counts[row - 1] = s as u32;
            m -= s;
        }
        (m == 0).then_some(counts)
    }
}

fn check_finite(perf: f64) -> Result<f64> {
    if perf.is_finite() {
        Ok(perf)
    } else {
        Err(Error::NonFinite(format!("evaluator returned {perf}")))
    }
}

/// Run the DP. `evaluator` maps a per-head threshold vector to a performance
/// score where higher is better.
pub fn fill_table(
    mut evaluator: impl FnMut(&[f64]) -> Result<f64>,
    heads: usize,
    budget: usize,
    t_init: f64,
) -> Result<DpState> {
    if heads == 0 {
        return Err(Error::InvalidConfig("calibration needs at least one head".into()));
    }
    if budget == 0 {
        return Err(Error::InvalidConfig("adjustment budget M must be at least 1".into()));
    }
    if !(t_init > 0.0 && t_init <= 1.0) {
        return Err(Error::InvalidConfig(format!("t_init {t_init} must lie in (0, 1]")));
    }
    let mut eval_steps = |steps: &[u32]| -> Result<f64> {
        let t: Vec<f64> = steps.iter().map(|&s| reduced_threshold(t_init, s)).collect();
        check_finite(evaluator(&t)?)
    };

    let baseline = eval_steps(&vec![0; heads])?;
    let mut perf = vec![vec![f64::NEG_INFINITY; budget + 1]; heads + 1];
    let mut choice = vec![vec![None; budget + 1]; heads + 1];
    let mut steps: Vec<Vec<Option<Vec<u32>>>> = vec![vec![None; budget + 1]; heads + 1];
    for h in 0..=heads {
        perf[h][0] = baseline;
        steps[h][0] = Some(vec![0; heads]);
        if h > 0 {
            choice[h][0] = Some(0);
        }
    }

    for h in 1..=heads {
        for m in 1..=budget {
            let mut best = perf[h - 1][m];
            let mut best_choice = steps[h - 1][m].as_ref().map(|_| 0);
            let mut best_steps = steps[h - 1][m].clone();
            for s in 1..=m {
                let Some(prev) = &steps[h - 1][m - s] else { continue };
                let mut cand = prev.clone();
                cand[h - 1] += s as u32;
                let p = eval_steps(&cand)?;
                if p > best || best_steps.is_none() {
                    best = p;
                    best_choice = Some(s);
                    best_steps = Some(cand);
                }
            }
            perf[h][m] = best;
            choice[h][m] = best_choice;
            steps[h][m] = best_steps;
        }
    }
    Ok(DpState {
        t_init,
        budget,
        perf,
        choice,
        steps,
    })
}

/// Lowest per-head thresholds whose performance stays within `epsilon` of
/// running every head at `t_init`.
pub fn predict_min_thresholds(
    evaluator: impl FnMut(&[f64]) -> Result<f64>,
    heads: usize,
    budget: usize,
    t_init: f64,
    epsilon: f64,
) -> Result<HeadThresholds> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} must be non-negative")));
    }
    let dp = fill_table(evaluator, heads, budget, t_init)?;
    let baseline = dp.perf[heads][0];
    let m = (0..=budget)
        .rev()
        .find(|&m| dp.steps[heads][m].is_some() && dp.perf[heads][m] >= baseline - epsilon)
        .unwrap_or(0);
    let counts = dp
        .backtrack(heads, m)
        .ok_or_else(|| Error::InvalidConfig(format!("no DP state for m = {m}")))?;
    debug_assert_eq!(Some(&counts), dp.steps[heads][m].as_ref());
    Ok(HeadThresholds::from_steps(t_init, counts))
}

/// Output-fidelity evaluator over a fixed calibration set.
///
/// Performance is `-mean(output_error)` over every (workload, head) pair when
/// head `h` runs threshold selection at `t[h]`. Block probabilities, dense
/// outputs and per-threshold errors are cached.
pub struct FidelityEvaluator {
    cfg: SelectionConfig,
    heads: Vec<Vec<HeadCache>>,
    memo: RefCell<HashMap<MemoKey, (f64, f64)>>,
}

/// (workload, head, threshold bits) -> (error, density).
type MemoKey = (usize, usize, u64);

struct HeadCache {
    inp: AttentionInputs,
    probs: Vec<Vec<f64>>,
    full: Tensor,
}

impl FidelityEvaluator {
    /// `workloads[w][h]` is head `h` of calibration workload `w`; every
    /// workload must have the same head count.
    pub fn new(workloads: Vec<Vec<AttentionInputs>>, cfg: &SelectionConfig) -> Result<Self> {
        cfg.validate()?;
        let n_heads = workloads.first().map(Vec::len).unwrap_or(0);
        if n_heads == 0 || workloads.iter().any(|w| w.len() != n_heads) {
            return Err(Error::InvalidConfig(
                "calibration needs at least one workload, all with the same non-zero head count".into(),
            ));
        }
        let heads = workloads
            .into_iter()
            .map(|w| {
                w.into_par_iter()
                    .map(|inp| {
                        let probs = block_prob_rows(&inp, cfg)?;
                        let full = full_attention(&inp)?;
                        Ok(HeadCache { inp, probs, full })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FidelityEvaluator {
            cfg: cfg.clone(),
            heads,
            memo: RefCell::new(HashMap::new()),
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads[0].len()
    }

    /// (output error, density) of head `h` in workload `w` at threshold `tau`.
    fn head_stats(&self, w: usize, h: usize, tau: f64) -> Result<(f64, f64)> {
        let key = (w, h, tau.to_bits());
        if let Some(&hit) = self.memo.borrow().get(&key) {
            return Ok(hit);
        }
        let hc = &self.heads[w][h];
        let cfg = SelectionConfig {
            tau,
            ..self.cfg.clone()
        };
        let mask = mask_from_probs(&hc.probs, &cfg)?;
        let out = sparse_attention(&hc.inp, &mask, cfg.block_size)?;
        let stats = (output_error(&out, &hc.full)?, density(&mask, hc.inp.causal()));
        self.memo.borrow_mut().insert(key, stats);
        Ok(stats)
    }

    fn check(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.n_heads() {
            return Err(Error::Evaluator(format!(
                "expected {} thresholds, got {}",
                self.n_heads(),
                t.len()
            )));
        }
        Ok(())
    }

    /// Mean output error over all workloads and heads.
    pub fn error(&self, t: &[f64]) -> Result<f64> {
        self.mean_stat(t, |s| s.0)
    }

    pub fn performance(&self, t: &[f64]) -> Result<f64> {
        Ok(-self.error(t)?)
    }

    /// Mean mask density over all workloads and heads.
    pub fn density(&self, t: &[f64]) -> Result<f64> {
        self.mean_stat(t, |s| s.1)
    }

    fn mean_stat(&self, t: &[f64], pick: impl Fn((f64, f64)) -> f64) -> Result<f64> {
        self.check(t)?;
        let mut total = 0.0;
        for w in 0..self.heads.len() {
            for (h, &tau) in t.iter().enumerate() {
                total += pick(self.head_stats(w, h, tau)?);
            }
        }
        Ok(total / (self.heads.len() * t.len()) as f64)
    }
}

/// Persisted calibration outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub t_init: f64,
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub step_counts: Vec<u32>,
    pub baseline_perf: f64,
    pub final_perf: f64,
}

impl CalibrationResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Calibrate against the fidelity evaluator and report both ends.
pub fn calibrate(evaluator: &FidelityEvaluator, budget: usize, t_init: f64, epsilon: f64) -> Result<CalibrationResult> {
    let h = evaluator.n_heads();
    let found = predict_min_thresholds(|t| evaluator.performance(t), h, budget, t_init, epsilon)?;
    Ok(CalibrationResult {
        t_init,
        epsilon,
        baseline_perf: evaluator.performance(&vec![t_init; h])?,
        final_perf: evaluator.performance(&found.thresholds)?,
        thresholds: found.thresholds,
        step_counts: found.step_counts,
    })
}
