//! Classification metrics and paired significance testing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::catalog::CategoryId;
use crate::error::{Error, Result};

/// Probabilities at or above this are classified SPQ.
pub const THRESHOLD: f64 = 0.5;

/// Categories with fewer evaluated questions get no per-category F1.
pub const MIN_CATEGORY_QUESTIONS: usize = 50;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Positive class is SPQ.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Only categories with at least [`MIN_CATEGORY_QUESTIONS`] questions.
    pub per_category_f1: BTreeMap<CategoryId, f64>,
    /// Every category seen; sums to `confusion`.
    pub per_category: BTreeMap<CategoryId, Confusion>,
}

impl Metrics {
    pub fn from_confusion(per_category: BTreeMap<CategoryId, Confusion>) -> Self {
        let mut confusion = Confusion::default();
        for c in per_category.values() {
            confusion.merge(c);
        }
        Self {
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            confusion,
            per_category_f1: per_category
                .iter()
                .filter(|(_, c)| c.total() >= MIN_CATEGORY_QUESTIONS)
                .map(|(&k, c)| (k, c.f1()))
                .collect(),
            per_category,
        }
    }

    /// Thresholds `probs` at [`THRESHOLD`].
    pub fn from_scores(probs: &[f64], labels: &[bool], categories: &[CategoryId]) -> Result<Self> {
        if probs.len() != labels.len() || probs.len() != categories.len() {
            return Err(Error::Contract(format!(
                "{} scores, {} labels and {} categories",
                probs.len(),
                labels.len(),
                categories.len()
            )));
        }
        if probs.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut per_category: BTreeMap<CategoryId, Confusion> = BTreeMap::new();
        for ((&p, &y), &c) in probs.iter().zip(labels).zip(categories) {
            per_category.entry(c).or_default().record(p >= THRESHOLD, y);
        }
        Ok(Self::from_confusion(per_category))
    }
}

/// F1 of the best label-blind predictor (always SPQ) at positive rate
/// `pi`: `2 pi / (1 + pi)`.
pub fn chance_f1(pi: f64) -> f64 {
    if pi <= 0.0 {
        0.0
    } else {
        2.0 * pi / (1.0 + pi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub t: f64,
    pub df: usize,
    pub mean_difference: f64,
    /// Zero variance of the differences: the statistic is undefined and
    /// `p_value` is reported as 1.
    pub degenerate: bool,
}

/// Two-sided paired t-test on per-seed scores.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<Significance> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("paired runs differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!("paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 || !var.is_finite() {
        return Ok(Significance {
            p_value: 1.0,
            t: 0.0,
            df,
            mean_difference: mean,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Contract(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(Significance {
        p_value,
        t,
        df,
        mean_difference: mean,
        degenerate: false,
    })
}
