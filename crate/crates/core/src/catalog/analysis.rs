//! Correlation analyses over labeled questions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{events_in, CategoryId, Dataset, Question, SECONDS_PER_DAY};
use crate::error::{Error, Result};

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Same-category purchase indicators for the four 28-day windows around a
/// question: `t0 = (t, t+w]`, `tm1 = [t-w, t)`, `tm2 = [t-2w, t-w)`, `tm3 = [t-3w, t-2w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowIndicators {
    pub t0: bool,
    pub tm1: bool,
    pub tm2: bool,
    pub tm3: bool,
    pub spq: bool,
}

pub fn window_indicators(ds: &Dataset, q: &Question, window_days: i64) -> Result<WindowIndicators> {
    let w = window_days * SECONDS_PER_DAY;
    let cat = ds.catalog.category_of(q.product)?;
    let events = ds.purchases.for_user(q.user);
    let hit = |lo: i64, hi: i64| -> Result<bool> {
        for e in events_in(events, lo, hi) {
            if ds.catalog.category_of(e.product)? == cat {
                return Ok(true);
            }
        }
        Ok(false)
    };
    let label = q.label.ok_or(Error::Empty("question label"))?;
    Ok(WindowIndicators {
        t0: hit(q.ts + 1, q.ts + w + 1)?,
        tm1: hit(q.ts - w, q.ts)?,
        tm2: hit(q.ts - 2 * w, q.ts - w)?,
        tm3: hit(q.ts - 3 * w, q.ts - 2 * w)?,
        spq: label.is_spq(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowCorrelations {
    pub r_t0_tm1: f64,
    pub r_t0_tm2: f64,
    pub r_t0_tm3: f64,
    pub r_prior_purchase_vs_spq: f64,
    pub n: usize,
}

/// Pearson correlations between the window indicators of every labeled question.
pub fn purchase_window_correlations(ds: &Dataset) -> Result<WindowCorrelations> {
    let ind: Vec<WindowIndicators> = ds
        .questions
        .iter()
        .filter(|q| q.label.is_some())
        .map(|q| window_indicators(ds, q, super::DEFAULT_WINDOW_DAYS))
        .collect::<Result<_>>()?;
    if ind.is_empty() {
        return Err(Error::Empty("labeled questions"));
    }
    let col = |f: fn(&WindowIndicators) -> bool| -> Vec<f64> {
        ind.iter().map(|w| if f(w) { 1.0 } else { 0.0 }).collect()
    };
    let (t0, tm1, tm2, tm3, spq) = (
        col(|w| w.t0),
        col(|w| w.tm1),
        col(|w| w.tm2),
        col(|w| w.tm3),
        col(|w| w.spq),
    );
    Ok(WindowCorrelations {
        r_t0_tm1: pearson(&t0, &tm1)?,
        r_t0_tm2: pearson(&t0, &tm2)?,
        r_t0_tm3: pearson(&t0, &tm3)?,
        r_prior_purchase_vs_spq: pearson(&tm1, &spq)?,
        n: ind.len(),
    })
}

/// Correlation of SPQ status between a user's first labeled question and
/// their next one about a different category. `None` with fewer than two
/// such users or a degenerate pairing.
pub fn user_pair_correlation(ds: &Dataset) -> Result<Option<(f64, usize)>> {
    let mut by_user: BTreeMap<_, Vec<&Question>> = BTreeMap::new();
    for q in ds.questions.iter().filter(|q| q.label.is_some()) {
        by_user.entry(q.user).or_default().push(q);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for qs in by_user.values_mut() {
        qs.sort_by_key(|q| (q.ts, q.id));
        let first = qs[0];
        let c0 = ds.catalog.category_of(first.product)?;
        for q in &qs[1..] {
            if ds.catalog.category_of(q.product)? != c0 {
                a.push(first.label.map_or(0.0, |l| l.as_f64()));
                b.push(q.label.map_or(0.0, |l| l.as_f64()));
                break;
            }
        }
    }
    match pearson(&a, &b) {
        Ok(r) => Ok(Some((r, a.len()))),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `(question count, SPQ rate)` per leaf category over labeled questions.
pub fn category_spq_rates(ds: &Dataset) -> Result<BTreeMap<CategoryId, (usize, f64)>> {
    let mut acc: BTreeMap<CategoryId, (usize, usize)> = BTreeMap::new();
    for q in &ds.questions {
        let Some(label) = q.label else { continue };
        let e = acc.entry(ds.catalog.category_of(q.product)?).or_default();
        e.0 += 1;
        e.1 += label.is_spq() as usize;
    }
    Ok(acc
        .into_iter()
        .map(|(c, (n, s))| (c, (n, s as f64 / n as f64)))
        .collect())
}
