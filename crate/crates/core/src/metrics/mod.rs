//! Confusion counts, point metrics, ROC and AUC.

mod report;

pub use report::{evaluate_split, read_scores_csv, write_scores_csv, MetricsReport};

use crate::error::{Error, Result};

/// Scores at or above this are predicted positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub const FLAG_PRECISION_UNDEFINED: &str = "precision_zero_denominator";
pub const FLAG_RECALL_UNDEFINED: &str = "recall_zero_denominator";
pub const FLAG_F1_UNDEFINED: &str = "f1_zero_denominator";
pub const FLAG_AUC_UNDEFINED: &str = "auc_undefined_single_class";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub subject_id: u32,
    pub view_index: u32,
    pub score: f64,
    /// 1 = positive.
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> Self {
        ScoredSample {
            subject_id: 0,
            view_index: 0,
            score,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check(samples: &[ScoredSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.score)) {
        return Err(Error::InvalidScore(s.score));
    }
    Ok(())
}

/// Counts with `score >= threshold` predicted positive.
pub fn confusion(samples: &[ScoredSample], threshold: f64) -> Result<Confusion> {
    check(samples)?;
    let mut c = Confusion::default();
    for s in samples {
        match (s.score >= threshold, s.label == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Which ratios hit a zero denominator and were set to 0.
    pub flags: Vec<&'static str>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean; `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    (precision + recall > 0.0).then(|| 2.0 * precision * recall / (precision + recall))
}

pub fn point_metrics(c: &Confusion) -> PointMetrics {
    let mut flags = Vec::new();
    let mut or_zero = |v: Option<f64>, flag| {
        v.unwrap_or_else(|| {
            flags.push(flag);
            0.0
        })
    };
    let accuracy = ratio(c.tp + c.tn, c.total()).unwrap_or(0.0);
    let precision = or_zero(ratio(c.tp, c.tp + c.fp), FLAG_PRECISION_UNDEFINED);
    let recall = or_zero(ratio(c.tp, c.tp + c.fn_), FLAG_RECALL_UNDEFINED);
    let f1 = or_zero(f1_score(precision, recall), FLAG_F1_UNDEFINED);
    PointMetrics {
        accuracy,
        precision,
        recall,
        f1,
        flags,
    }
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    check(samples)?;
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

fn by_score_desc(samples: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| b.score.total_cmp(&a.score));
    s
}

/// ROC points `(fpr, tpr)` from `(0,0)` to `(1,1)`, one step per distinct
/// score so tied samples move together.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(samples)?;
    let sorted = by_score_desc(samples);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, s) in sorted.iter().enumerate() {
        if s.label == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = sorted.get(i + 1).is_none_or(|n| n.score != s.score);
        if group_ends {
            points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(points)
}

/// Area under piecewise-linear `(x, y)` points by the trapezoid rule.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, computed from midranks.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let midrank = (i + j + 2) as f64 / 2.0;
        let positives = sorted[i..=j].iter().filter(|s| s.label == 1).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn roc_auc(samples: &[ScoredSample]) -> Result<(Vec<(f64, f64)>, f64)> {
    Ok((roc_curve(samples)?, auc(samples)?))
}
