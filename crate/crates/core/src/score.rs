//! Population-relative run scoring.
//!
//! `score = goodRun * (0.5 Ctrl_min / RunCtrl + 0.5 Tsep_min / RunTsep)`, where the minima
//! are taken over the good runs that share the run's obstacle radius.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cbf::CbfParams;
use crate::sim::RunResult;

/// Summary of one simulated `(r_o, κ₁, κ₂)` combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub r_o: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    #[serde(with = "non_finite")]
    pub min_h: f64,
    #[serde(with = "non_finite")]
    pub run_ctrl: f64,
    #[serde(with = "non_finite")]
    pub run_tsep: f64,
    #[serde(with = "non_finite")]
    pub final_err: f64,
    pub good_run: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

/// Faulted runs carry NaN or infinite metrics; JSON stores them as `null` and reads back NaN.
mod non_finite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl RunRecord {
    pub fn from_result(r_o: f64, params: CbfParams<f64>, result: &RunResult<f64>) -> Self {
        Self {
            r_o,
            kappa1: params.kappa1,
            kappa2: params.kappa2,
            min_h: result.min_h,
            run_ctrl: result.run_ctrl,
            run_tsep: result.run_tsep,
            final_err: result.final_err,
            good_run: result.good_run,
            fault: result.fault.map(|f| f.tag().to_string()),
        }
    }

    pub fn same_setting(&self, r_o: f64, kappa1: f64, kappa2: f64) -> bool {
        self.r_o == r_o && self.kappa1 == kappa1 && self.kappa2 == kappa2
    }
}

/// Good-run minima for one obstacle radius; `None` while the group has no good run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMinima {
    pub r_o: f64,
    pub ctrl_min: Option<f64>,
    pub tsep_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBoard {
    runs: Vec<RunRecord>,
    scores: Vec<f64>,
    minima: Vec<GroupMinima>,
}

fn ratio(min: f64, value: f64) -> f64 {
    if value <= min {
        1.0
    } else {
        min / value
    }
}

impl ScoreBoard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends without rescoring; call [`ScoreBoard::rescore`] afterwards.
    pub fn push(&mut self, record: RunRecord) -> usize {
        self.runs.push(record);
        self.scores.push(0.0);
        self.runs.len() - 1
    }

    /// Appends and rescores every run.
    pub fn insert(&mut self, record: RunRecord) -> usize {
        let idx = self.push(record);
        self.rescore();
        idx
    }

    pub fn rescore(&mut self) {
        let mut minima: Vec<GroupMinima> = Vec::new();
        for run in &self.runs {
            let entry = match minima.iter_mut().find(|g| g.r_o == run.r_o) {
                Some(g) => g,
                None => {
                    minima.push(GroupMinima {
                        r_o: run.r_o,
                        ctrl_min: None,
                        tsep_min: None,
                    });
                    minima.last_mut().expect("just pushed")
                }
            };
            if run.good_run {
                entry.ctrl_min = Some(entry.ctrl_min.map_or(run.run_ctrl, |m| m.min(run.run_ctrl)));
                entry.tsep_min = Some(entry.tsep_min.map_or(run.run_tsep, |m| m.min(run.run_tsep)));
            }
        }
        minima.sort_by(|a, b| a.r_o.total_cmp(&b.r_o));
        self.scores = self
            .runs
            .iter()
            .map(|run| {
                if !run.good_run {
                    return 0.0;
                }
                let g = minima
                    .iter()
                    .find(|g| g.r_o == run.r_o)
                    .expect("every radius has a group");
                match (g.ctrl_min, g.tsep_min) {
                    (Some(c), Some(t)) => {
                        0.5 * ratio(c, run.run_ctrl) + 0.5 * ratio(t, run.run_tsep)
                    }
                    _ => 0.0,
                }
            })
            .collect();
        self.minima = minima;
    }

    pub fn runs(&self) -> &[RunRecord] {
        &self.runs
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, idx: usize) -> f64 {
        self.scores[idx]
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn minima(&self, r_o: f64) -> Option<&GroupMinima> {
        self.minima.iter().find(|g| g.r_o == r_o)
    }

    /// Distinct radii in increasing order.
    pub fn radii(&self) -> Vec<f64> {
        let mut r: Vec<f64> = Vec::new();
        for run in &self.runs {
            if !r.contains(&run.r_o) {
                r.push(run.r_o);
            }
        }
        r.sort_by(f64::total_cmp);
        r
    }

    pub fn find(&self, r_o: f64, kappa1: f64, kappa2: f64) -> Option<usize> {
        self.runs
            .iter()
            .position(|r| r.same_setting(r_o, kappa1, kappa2))
    }

    /// Highest-scoring run for a radius; ties go to smaller κ₁ then smaller κ₂.
    pub fn best_for(&self, r_o: f64) -> Option<usize> {
        self.ranked(r_o).into_iter().next()
    }

    /// Good runs for `r_o`, best first.
    pub fn ranked(&self, r_o: f64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.runs.len())
            .filter(|&i| self.runs[i].r_o == r_o && self.runs[i].good_run && self.scores[i] > 0.0)
            .collect();
        idx.sort_by(|&a, &b| {
            let (ra, rb) = (&self.runs[a], &self.runs[b]);
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then(ra.kappa1.total_cmp(&rb.kappa1))
                .then(ra.kappa2.total_cmp(&rb.kappa2))
        });
        idx
    }

    /// Results CSV: one row per run in insertion order.
    pub fn to_results_csv(&self) -> String {
        let mut out =
            String::from("r_o,kappa1,kappa2,min_h,run_ctrl,run_tsep,final_err,good_run,score\n");
        for (run, score) in self.runs.iter().zip(&self.scores) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                run.r_o,
                run.kappa1,
                run.kappa2,
                run.min_h,
                run.run_ctrl,
                run.run_tsep,
                run.final_err,
                u8::from(run.good_run),
                score
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scoreboard serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut board: Self = serde_json::from_str(text)?;
        board.scores.resize(board.runs.len(), 0.0);
        board.rescore();
        Ok(board)
    }
}

/// Rescores the whole board and returns it.
pub fn score_runs(mut board: ScoreBoard) -> ScoreBoard {
    board.rescore();
    board
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(r_o: f64, k1: f64, ctrl: f64, tsep: f64, good: bool) -> RunRecord {
        RunRecord {
            r_o,
            kappa1: k1,
            kappa2: 1.0,
            min_h: if good { 0.1 } else { -0.1 },
            run_ctrl: ctrl,
            run_tsep: tsep,
            final_err: 0.0,
            good_run: good,
            fault: None,
        }
    }

    #[test]
    fn single_good_run_scores_one() {
        let mut b = ScoreBoard::new();
        b.insert(rec(0.2, 1.0, 3.0, 4.0, true));
        assert_eq!(b.score(0), 1.0);
    }

    #[test]
    fn double_effort_scores_half() {
        let mut b = ScoreBoard::new();
        b.push(rec(0.2, 1.0, 3.0, 4.0, true));
        b.push(rec(0.2, 2.0, 6.0, 8.0, true));
        b.rescore();
        assert_eq!(b.score(1), 0.5);
        assert_eq!(b.minima(0.2).unwrap().ctrl_min, Some(3.0));
    }

    #[test]
    fn bad_runs_score_zero() {
        let mut b = ScoreBoard::new();
        b.insert(rec(0.2, 1.0, 0.1, 0.1, false));
        assert_eq!(b.score(0), 0.0);
        assert_eq!(b.minima(0.2).unwrap().ctrl_min, None);
        b.insert(rec(0.2, 2.0, 5.0, 5.0, true));
        assert_eq!(b.score(0), 0.0);
        assert_eq!(b.score(1), 1.0);
    }

    #[test]
    fn radii_are_scored_independently() {
        let mut b = ScoreBoard::new();
        b.push(rec(0.1, 1.0, 1.0, 1.0, true));
        b.push(rec(0.4, 1.0, 10.0, 10.0, true));
        b.rescore();
        assert_eq!(b.scores(), &[1.0, 1.0]);
        assert_eq!(b.radii(), vec![0.1, 0.4]);
    }

    #[test]
    fn json_round_trip_rescores() {
        let mut b = ScoreBoard::new();
        b.push(rec(0.1, 1.0, 1.0, 2.0, true));
        b.push(rec(0.1, 3.0, 2.0, 1.0, true));
        b.rescore();
        let back = ScoreBoard::from_json(&b.to_json()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn non_finite_metrics_survive_json() {
        let mut b = ScoreBoard::new();
        let mut r = rec(0.2, 1.0, 1.0, 1.0, false);
        r.run_ctrl = f64::INFINITY;
        r.final_err = f64::NAN;
        b.insert(r);
        let back = ScoreBoard::from_json(&b.to_json()).unwrap();
        assert!(back.runs()[0].run_ctrl.is_nan());
        assert!(back.runs()[0].final_err.is_nan());
        assert_eq!(back.score(0), 0.0);
    }

    proptest! {
        #[test]
        fn scores_bounded_and_monotone(
            runs in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0, any::<bool>()), 1..20),
            extra in (0.1f64..10.0, 0.1f64..10.0, any::<bool>()),
        ) {
            let mut b = ScoreBoard::new();
            for (i, (c, t, g)) in runs.iter().enumerate() {
                b.push(rec(0.2, i as f64, *c, *t, *g));
            }
            b.rescore();
            for s in b.scores() {
                prop_assert!((0.0..=1.0).contains(s));
            }
            let before = b.clone();
            b.insert(rec(0.2, 99.0, extra.0, extra.1, extra.2));
            let (m0, m1) = (before.minima(0.2).unwrap(), b.minima(0.2).unwrap());
            if let (Some(a), Some(c)) = (m0.ctrl_min, m1.ctrl_min) {
                prop_assert!(c <= a);
            }
            if let (Some(a), Some(c)) = (m0.tsep_min, m1.tsep_min) {
                prop_assert!(c <= a);
            }
            for i in 0..before.len() {
                prop_assert!(b.score(i) <= before.score(i) + 1e-15);
            }
        }
    }
}
