//! CBF gain search: exhaustive grid, the guided incremental search, and dataset export.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbf::CbfParams;
use crate::score::{RunRecord, ScoreBoard};
use crate::sim::{simulate_summary, Scenario, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid guided search config: {0}")]
    InvalidGuided(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("malformed dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r_o_values: Vec<f64>,
    /// Shared by κ₁ and κ₂.
    pub kappa_values: Vec<f64>,
}

fn strictly_increasing_positive(values: &[f64]) -> bool {
    !values.is_empty()
        && values.iter().all(|v| v.is_finite() && *v > 0.0)
        && values.windows(2).all(|w| w[0] < w[1])
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !strictly_increasing_positive(&self.r_o_values) {
            return Err(SearchError::InvalidGrid(
                "r_o_values must be non-empty, positive and strictly increasing".into(),
            ));
        }
        if !strictly_increasing_positive(&self.kappa_values) {
            return Err(SearchError::InvalidGrid(
                "kappa_values must be non-empty, positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// Every `(r_o, κ₁, κ₂)`, radius-major.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::with_capacity(self.len());
        for &r_o in &self.r_o_values {
            for &kappa1 in &self.kappa_values {
                for &kappa2 in &self.kappa_values {
                    out.push(Setting {
                        r_o,
                        kappa1,
                        kappa2,
                    });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.r_o_values.len() * self.kappa_values.len() * self.kappa_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setting {
    pub r_o: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl Setting {
    pub fn params(&self) -> CbfParams<f64> {
        CbfParams {
            kappa1: self.kappa1,
            kappa2: self.kappa2,
        }
    }
}

/// Runs one setting against the base scenario; scenario-level failures become faulted records.
pub fn evaluate_setting(base: &Scenario<f64>, setting: Setting) -> RunRecord {
    let scenario = base.with_setting(setting.r_o, setting.params());
    match simulate_summary(&scenario) {
        Ok(result) => RunRecord::from_result(setting.r_o, setting.params(), &result),
        Err(err) => {
            let (min_h, tag) = match err {
                SimError::UnsafeInitialState { h } => (h, "unsafe_initial_state"),
                _ => (f64::NAN, "invalid_scenario"),
            };
            RunRecord {
                r_o: setting.r_o,
                kappa1: setting.kappa1,
                kappa2: setting.kappa2,
                min_h,
                run_ctrl: f64::NAN,
                run_tsep: f64::NAN,
                final_err: f64::NAN,
                good_run: false,
                fault: Some(tag.to_string()),
            }
        }
    }
}

/// Simulates settings on a pool of `workers` threads; output order follows input order.
pub fn evaluate_settings(
    settings: &[Setting],
    base: &Scenario<f64>,
    workers: usize,
) -> Result<Vec<RunRecord>, SearchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SearchError::Pool(e.to_string()))?;
    Ok(pool.install(|| {
        settings
            .par_iter()
            .map(|s| evaluate_setting(base, *s))
            .collect()
    }))
}

/// Exhaustive search over the grid; rescored once after all runs complete.
pub fn grid_search(
    grid: &GridSpec,
    base: &Scenario<f64>,
    workers: usize,
) -> Result<ScoreBoard, SearchError> {
    grid_search_resume(grid, base, workers, ScoreBoard::new())
}

/// Continues a partially filled board, skipping settings that already have a record.
pub fn grid_search_resume(
    grid: &GridSpec,
    base: &Scenario<f64>,
    workers: usize,
    mut board: ScoreBoard,
) -> Result<ScoreBoard, SearchError> {
    grid.validate()?;
    let pending: Vec<Setting> = grid
        .settings()
        .into_iter()
        .filter(|s| board.find(s.r_o, s.kappa1, s.kappa2).is_none())
        .collect();
    for record in evaluate_settings(&pending, base, workers)? {
        board.push(record);
    }
    board.rescore();
    Ok(board)
}

/// Source of run outcomes for the guided search.
pub trait Evaluator {
    fn evaluate(&mut self, r_o: f64, params: CbfParams<f64>) -> RunRecord;
}

impl<F> Evaluator for F
where
    F: FnMut(f64, CbfParams<f64>) -> RunRecord,
{
    fn evaluate(&mut self, r_o: f64, params: CbfParams<f64>) -> RunRecord {
        self(r_o, params)
    }
}

/// Evaluates by simulating the base scenario.
pub struct SimEvaluator<'a> {
    pub base: &'a Scenario<f64>,
}

impl Evaluator for SimEvaluator<'_> {
    fn evaluate(&mut self, r_o: f64, params: CbfParams<f64>) -> RunRecord {
        evaluate_setting(
            self.base,
            Setting {
                r_o,
                kappa1: params.kappa1,
                kappa2: params.kappa2,
            },
        )
    }
}

/// Replays records from a finished board (e.g. a grid search over the same lattice).
pub struct BoardEvaluator<'a, E> {
    pub board: &'a ScoreBoard,
    pub fallback: E,
}

impl<E: Evaluator> Evaluator for BoardEvaluator<'_, E> {
    fn evaluate(&mut self, r_o: f64, params: CbfParams<f64>) -> RunRecord {
        match self.board.find(r_o, params.kappa1, params.kappa2) {
            Some(i) => self.board.runs()[i].clone(),
            None => self.fallback.evaluate(r_o, params),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedConfig {
    /// Step `s₁ = s₂`. On an explicit lattice it counts lattice positions.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Consecutive decreasing scores tolerated within one κ₁ column.
    #[serde(default = "default_limit")]
    pub i_limit: usize,
    /// Consecutive decreasing column bests tolerated across κ₁ values.
    #[serde(default = "default_limit")]
    pub j_limit: usize,
    #[serde(default = "default_cap_ratio")]
    pub kappa2_cap_ratio: f64,
    #[serde(default = "default_start")]
    pub kappa_start: f64,
    /// Evaluation cap per radius.
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Explicit κ lattice shared by both gains; `None` uses `kappa_start + k γ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Vec<f64>>,
    /// Radii searched by the guided driver.
    #[serde(default = "default_radii")]
    pub r_o_values: Vec<f64>,
}

fn default_gamma() -> f64 {
    2.0
}
fn default_limit() -> usize {
    3
}
fn default_cap_ratio() -> f64 {
    1.3
}
fn default_start() -> f64 {
    1.0
}
fn default_budget() -> usize {
    200
}
fn default_radii() -> Vec<f64> {
    vec![0.2]
}

impl Default for GuidedConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            i_limit: default_limit(),
            j_limit: default_limit(),
            kappa2_cap_ratio: default_cap_ratio(),
            kappa_start: default_start(),
            budget: default_budget(),
            lattice: None,
            r_o_values: default_radii(),
        }
    }
}

impl GuidedConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidGuided(m.to_string()));
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if self.i_limit == 0 || self.j_limit == 0 {
            return bad("i_limit and j_limit must be at least 1");
        }
        if !(self.kappa2_cap_ratio > 0.0) || !(self.kappa_start > 0.0) {
            return bad("kappa_start and kappa2_cap_ratio must be positive");
        }
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if let Some(values) = &self.lattice {
            if !strictly_increasing_positive(values) {
                return bad("lattice must be positive and strictly increasing");
            }
            if self.gamma.fract() != 0.0 {
                return bad("gamma must be a whole number of lattice positions");
            }
        }
        Ok(())
    }

    /// Gain value at lattice coordinate `k`, `None` past the end of an explicit lattice.
    fn value(&self, k: usize) -> Option<f64> {
        match &self.lattice {
            None => Some(self.kappa_start + self.gamma * k as f64),
            Some(values) => values.get(k * self.gamma as usize).copied(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidedAction {
    /// New best: advance κ₂.
    NewBest,
    /// Not a new best, keep advancing κ₂.
    NextKappa2,
    /// Column finished (decreasing scores or κ₂ cap): advance κ₁, reset κ₂.
    NextKappa1,
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub kappa1: f64,
    pub kappa2: f64,
    /// Score right after this run was inserted and the board rescored.
    pub score: f64,
    pub action: GuidedAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedOutcome {
    pub best: Option<CbfParams<f64>>,
    pub best_score: f64,
    pub board: ScoreBoard,
    pub evals: usize,
    /// Budget reached before the termination rule fired.
    pub truncated: bool,
    pub trace: Vec<GuidedStep>,
}

/// Guided search for one radius.
///
/// Starting at `(κ_start, κ_start)`, every run is inserted into the board and all scores are
/// recomputed. A run that beats every earlier run advances κ₂. Otherwise the column ends
/// after `i_limit` consecutive score decreases or once κ₂ ≥ ratio·κ₁, moving to the next κ₁
/// with κ₂ reset. The search stops after `j_limit` consecutive columns whose best score
/// fell below the previous column's best.
pub fn guided_search<E: Evaluator>(
    config: &GuidedConfig,
    r_o: f64,
    evaluator: &mut E,
) -> Result<GuidedOutcome, SearchError> {
    guided_search_from(config, r_o, evaluator, ScoreBoard::new())
}

/// Guided search seeded with an existing board for the same radius.
///
/// Seeded records count towards the population minima; replaying a persisted search
/// from an empty board reproduces its decisions exactly.
pub fn guided_search_from<E: Evaluator>(
    config: &GuidedConfig,
    r_o: f64,
    evaluator: &mut E,
    mut board: ScoreBoard,
) -> Result<GuidedOutcome, SearchError> {
    config.validate()?;
    let mut trace = Vec::new();
    let (mut k1, mut k2) = (0usize, 0usize);
    let mut prev_in_column: Option<usize> = None;
    let mut column: Vec<usize> = Vec::new();
    let mut prev_column: Option<Vec<usize>> = None;
    let (mut i_count, mut j_count) = (0usize, 0usize);
    let mut evals = 0usize;
    let mut truncated = false;

    let max_score = |board: &ScoreBoard, idx: &[usize]| {
        idx.iter().map(|&i| board.score(i)).fold(0.0f64, f64::max)
    };

    while let Some(kappa1) = config.value(k1) {
        let kappa2 = match config.value(k2) {
            Some(v) => v,
            None => {
                // κ₂ axis exhausted on an explicit lattice: close the column
                if close_column(
                    &board,
                    &mut column,
                    &mut prev_column,
                    &mut j_count,
                    max_score,
                ) >= config.j_limit
                {
                    break;
                }
                k1 += 1;
                k2 = 0;
                i_count = 0;
                prev_in_column = None;
                continue;
            }
        };
        if evals >= config.budget {
            truncated = true;
            break;
        }
        let params = CbfParams { kappa1, kappa2 };
        let before = board.len();
        let idx = board.insert(evaluator.evaluate(r_o, params));
        evals += 1;
        column.push(idx);
        let score = board.score(idx);
        let best_before = (0..before)
            .filter(|&i| board.runs()[i].r_o == r_o)
            .map(|i| board.score(i))
            .fold(0.0f64, f64::max);
        let at_cap = kappa2 >= config.kappa2_cap_ratio * kappa1;

        let mut action = if score > best_before {
            i_count = 0;
            GuidedAction::NewBest
        } else {
            let decreasing = prev_in_column.is_some_and(|p| score < board.score(p));
            i_count = if decreasing { i_count + 1 } else { 0 };
            if i_count >= config.i_limit {
                GuidedAction::NextKappa1
            } else {
                GuidedAction::NextKappa2
            }
        };
        if at_cap {
            action = GuidedAction::NextKappa1;
        }

        if action == GuidedAction::NextKappa1 {
            let j = close_column(
                &board,
                &mut column,
                &mut prev_column,
                &mut j_count,
                max_score,
            );
            if j >= config.j_limit {
                action = GuidedAction::Finished;
            }
            k1 += 1;
            k2 = 0;
            i_count = 0;
            prev_in_column = None;
        } else {
            k2 += 1;
            prev_in_column = Some(idx);
        }
        log::debug!("guided r_o={r_o} k1={kappa1} k2={kappa2} score={score:.6} {action:?}");
        trace.push(GuidedStep {
            kappa1,
            kappa2,
            score,
            action,
        });
        if action == GuidedAction::Finished {
            break;
        }
    }

    let best_idx = board.best_for(r_o);
    Ok(GuidedOutcome {
        best: best_idx.map(|i| {
            let run = &board.runs()[i];
            CbfParams {
                kappa1: run.kappa1,
                kappa2: run.kappa2,
            }
        }),
        best_score: best_idx.map_or(0.0, |i| board.score(i)),
        board,
        evals,
        truncated,
        trace,
    })
}

/// Ends the current κ₁ column and returns the updated count of consecutive drops.
fn close_column(
    board: &ScoreBoard,
    column: &mut Vec<usize>,
    prev_column: &mut Option<Vec<usize>>,
    j_count: &mut usize,
    max_score: impl Fn(&ScoreBoard, &[usize]) -> f64,
) -> usize {
    if column.is_empty() {
        return *j_count;
    }
    let current = max_score(board, column);
    if let Some(prev) = prev_column.as_deref() {
        if current < max_score(board, prev) {
            *j_count += 1;
        } else {
            *j_count = 0;
        }
    }
    *prev_column = Some(std::mem::take(column));
    *j_count
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub r_o: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub rank: usize,
    pub score: f64,
}

/// Top-`k` good runs per radius, best first; ties broken by smaller κ₁ then κ₂.
pub fn export_dataset(board: &ScoreBoard, k: usize) -> Vec<DatasetRow> {
    let mut rows = Vec::new();
    for r_o in board.radii() {
        let ranked = board.ranked(r_o);
        if ranked.is_empty() {
            log::warn!("no good runs for r_o = {r_o}; radius left out of the dataset");
        }
        for (rank, &i) in ranked.iter().take(k).enumerate() {
            let run = &board.runs()[i];
            rows.push(DatasetRow {
                r_o,
                kappa1: run.kappa1,
                kappa2: run.kappa2,
                rank: rank + 1,
                score: board.score(i),
            });
        }
    }
    rows
}

pub fn dataset_to_csv(rows: &[DatasetRow]) -> String {
    let mut out = String::from("r_o,kappa1,kappa2,rank,score\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.r_o, r.kappa1, r.kappa2, r.rank, r.score
        );
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Vec<DatasetRow>, SearchError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if n == 0 || line.is_empty() {
            continue;
        }
        let err = |reason: &str| SearchError::Dataset {
            line: n + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(err("expected r_o,kappa1,kappa2,rank[,score]"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err("not a number"));
        rows.push(DatasetRow {
            r_o: num(fields[0])?,
            kappa1: num(fields[1])?,
            kappa2: num(fields[2])?,
            rank: fields[3]
                .trim()
                .parse()
                .map_err(|_| err("rank is not an integer"))?,
            score: match fields.get(4) {
                Some(s) => num(s)?,
                None => f64::NAN,
            },
        });
    }
    Ok(rows)
}
