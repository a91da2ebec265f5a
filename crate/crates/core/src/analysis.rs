//! Per-arm trajectories of baseline-relative resultant simulatability, with
//! standard errors and effect sizes against the baseline iteration.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::policies::PolicyKind;
use crate::session::{SessionRecord, EXPERIMENTAL_ITERATIONS};

/// Effects above this are reported as medium to large.
pub const MEDIUM_LARGE_EFFECT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 2 samples per group (got {0})")]
    TooFewSamples(usize),
    #[error("pooled standard deviation is zero")]
    ZeroPooledSd,
    #[error("session '{0}' is not complete")]
    IncompleteSession(String),
    #[error("no sessions for arm {0}")]
    EmptyArm(PolicyKind),
    #[error("malformed summary csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; needs at least two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

fn pooled_variance(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(AnalysisError::TooFewSamples(s.len()));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok(((na - 1.0) * sample_variance(a) + (nb - 1.0) * sample_variance(b)) / (na + nb - 2.0))
}

/// Two-sample Cohen's d with pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, AnalysisError> {
    let pooled = pooled_variance(a, b)?.sqrt();
    if pooled == 0.0 {
        return Err(AnalysisError::ZeroPooledSd);
    }
    Ok((mean(a) - mean(b)) / pooled)
}

pub fn is_medium_large(d: f64) -> bool {
    d > MEDIUM_LARGE_EFFECT
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// P(T ≥ t) under equal means.
    pub p_greater: f64,
}

/// Student's two-sample t-test (equal variances), alternative mean(a) > mean(b).
pub fn t_test_greater(a: &[f64], b: &[f64]) -> Result<TTest, AnalysisError> {
    let pooled = pooled_variance(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    if se == 0.0 {
        return Err(AnalysisError::ZeroPooledSd);
    }
    let t = (mean(a) - mean(b)) / se;
    let df = na + nb - 2.0;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    Ok(TTest {
        t,
        df,
        p_greater: dist.sf(t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub arm: PolicyKind,
    /// 0 is the baseline iteration.
    pub t: u8,
    pub n: usize,
    /// Mean resultant relative to each session's own baseline.
    pub mean: f64,
    /// Standard error of that mean; absent below two sessions.
    pub se: Option<f64>,
    /// Cohen's d of the raw resultants at `t` against the baseline
    /// resultants; absent when undefined (fewer than two sessions or no spread).
    pub d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectorySummary {
    pub fn row(&self, arm: PolicyKind, t: u8) -> Option<&TrajectoryRow> {
        self.rows.iter().find(|r| r.arm == arm && r.t == t)
    }

    pub fn arms(&self) -> Vec<PolicyKind> {
        let mut arms: Vec<_> = self.rows.iter().map(|r| r.arm).collect();
        arms.dedup();
        arms
    }

    pub fn to_csv(&self) -> Result<String, AnalysisError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["arm", "t", "n", "mean", "se", "d"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(s: &str) -> Result<Self, AnalysisError> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<TrajectoryRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

fn arm_rows(arm: PolicyKind, sessions: &[&SessionRecord]) -> Vec<TrajectoryRow> {
    let baseline: Vec<f64> = sessions
        .iter()
        .map(|s| f64::from(s.baseline.resultant().unwrap_or(0)))
        .collect();
    let n = sessions.len();
    let mut rows = vec![TrajectoryRow {
        arm,
        t: 0,
        n,
        mean: 0.0,
        se: (n >= 2).then_some(0.0),
        d: Some(0.0),
    }];
    for t in 1..=EXPERIMENTAL_ITERATIONS {
        let idx = usize::from(t - 1);
        let rel: Vec<f64> = sessions
            .iter()
            .map(|s| f64::from(s.iterations[idx].relative_reward))
            .collect();
        let raw: Vec<f64> = sessions.iter().map(|s| f64::from(s.iterations[idx].reward)).collect();
        rows.push(TrajectoryRow {
            arm,
            t,
            n,
            mean: mean(&rel),
            se: (n >= 2).then(|| (sample_variance(&rel) / n as f64).sqrt()),
            d: cohens_d(&raw, &baseline).ok(),
        });
    }
    rows
}

/// Rows for every arm present, arms in `PolicyKind` order, `t` ascending.
pub fn summarize(logs: &[SessionRecord]) -> Result<TrajectorySummary, AnalysisError> {
    let mut by_arm: BTreeMap<PolicyKind, Vec<&SessionRecord>> = BTreeMap::new();
    for s in logs {
        if !s.is_complete() {
            return Err(AnalysisError::IncompleteSession(s.session_id.clone()));
        }
        by_arm.entry(s.policy).or_default().push(s);
    }
    let rows = by_arm.iter().flat_map(|(&arm, ss)| arm_rows(arm, ss)).collect();
    Ok(TrajectorySummary { rows })
}

/// Like [`summarize`], restricted to `arms`, each of which must have sessions.
pub fn summarize_arms(logs: &[SessionRecord], arms: &[PolicyKind]) -> Result<TrajectorySummary, AnalysisError> {
    let mut rows = Vec::new();
    for &arm in arms {
        let of_arm: Vec<SessionRecord> = logs.iter().filter(|s| s.policy == arm).cloned().collect();
        if of_arm.is_empty() {
            return Err(AnalysisError::EmptyArm(arm));
        }
        rows.extend(summarize(&of_arm)?.rows);
    }
    Ok(TrajectorySummary { rows })
}

/// Completed sessions only; in-flight ones are skipped.
pub fn summarize_complete(logs: &[SessionRecord]) -> TrajectorySummary {
    let done: Vec<SessionRecord> = logs.iter().filter(|s| s.is_complete()).cloned().collect();
    summarize(&done).expect("every session is complete")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_d() {
        let d = cohens_d(&[1.0, 3.0], &[-1.0, 1.0]).unwrap();
        assert!((d - 2.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cohens_d(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn d_errors() {
        assert!(matches!(
            cohens_d(&[1.0], &[1.0, 2.0]),
            Err(AnalysisError::TooFewSamples(1))
        ));
        assert!(matches!(
            cohens_d(&[2.0, 2.0], &[2.0, 2.0]),
            Err(AnalysisError::ZeroPooledSd)
        ));
    }

    #[test]
    fn t_test_matches_reference() {
        // scipy.stats.ttest_ind([1,2,3,4,5], [0,1,1,2,2], alternative="greater")
        let r = t_test_greater(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        assert!((r.t - 2.25).abs() < 1e-12);
        assert_eq!(r.df, 8.0);
        assert!((r.p_greater - 0.027283652899967592).abs() < 1e-9);
    }

    #[test]
    fn empty_summary_is_header_only() {
        assert_eq!(TrajectorySummary::default().to_csv().unwrap(), "arm,t,n,mean,se,d\n");
    }
}
