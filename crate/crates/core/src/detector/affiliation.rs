//! Affiliation precision and recall.
//!
//! Timestep `i` covers the continuous span `[i, i + 1)`, so an inclusive
//! event `[s, e]` becomes `[s, e + 1)`. The axis `[0, T)` is split into one
//! zone per ground-truth event with borders halfway between neighbouring
//! events. Inside a zone, each predicted point is scored by how unlikely a
//! uniformly random point of the zone is to lie at least as close to the
//! event, and each event point by how unlikely a uniformly random single-point
//! prediction is to lie at least as close to it as the actual predictions.
//! Both integrands are piecewise linear, so integrating them with the
//! midpoint rule between their kinks is exact.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Inclusive `[start, end]` run of anomalous timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventInterval {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffiliationResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when no zone received a prediction; `precision` is then 0.
    pub precision_defined: bool,
    /// Per zone `(precision, recall)`; precision is `None` for zones without predictions.
    pub zones: Vec<(Option<f64>, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    lo: f64,
    hi: f64,
}

impl Span {
    fn len(&self) -> f64 {
        self.hi - self.lo
    }

    fn intersect(&self, other: &Span) -> Option<Span> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (hi > lo).then_some(Span { lo, hi })
    }
}

fn to_spans(events: &[EventInterval], len: usize, what: &str) -> Result<Vec<Span>> {
    let mut sorted = events.to_vec();
    sorted.sort();
    for (i, ev) in sorted.iter().enumerate() {
        if ev.start > ev.end || ev.end >= len {
            return Err(invalid(format!(
                "{what} event [{}, {}] outside [0, {len})",
                ev.start, ev.end
            )));
        }
        if i > 0 && sorted[i - 1].end >= ev.start {
            return Err(invalid(format!("{what} events overlap at {}", ev.start)));
        }
    }
    Ok(sorted
        .iter()
        .map(|e| Span {
            lo: e.start as f64,
            hi: e.end as f64 + 1.0,
        })
        .collect())
}

/// Exact integral of a function that is linear between consecutive `kinks`.
fn integrate(lo: f64, hi: f64, kinks: &mut Vec<f64>, f: impl Fn(f64) -> f64) -> f64 {
    kinks.retain(|&k| k > lo && k < hi);
    kinks.push(lo);
    kinks.push(hi);
    kinks.sort_by(f64::total_cmp);
    kinks.dedup();
    kinks.windows(2).map(|p| (p[1] - p[0]) * f(0.5 * (p[0] + p[1]))).sum()
}

fn dist_to_span(x: f64, s: &Span) -> f64 {
    if x < s.lo {
        s.lo - x
    } else if x > s.hi {
        x - s.hi
    } else {
        0.0
    }
}

/// Mean over predicted points of `P(dist(X, truth) >= dist(x, truth))` with
/// `X` uniform on the zone.
fn zone_precision(zone: &Span, truth: &Span, preds: &[Span]) -> f64 {
    let width = zone.len();
    let left = truth.lo - zone.lo;
    let right = zone.hi - truth.hi;
    let survival = |x: f64| {
        let d = dist_to_span(x, truth);
        if d == 0.0 {
            1.0
        } else {
            1.0 - (truth.len() + d.min(left) + d.min(right)) / width
        }
    };
    let mut total = 0.0;
    let mut covered = 0.0;
    for p in preds {
        let mut kinks = vec![truth.lo, truth.hi, truth.lo - right, truth.hi + left];
        total += integrate(p.lo, p.hi, &mut kinks, survival);
        covered += p.len();
    }
    total / covered
}

/// Mean over truth points `y` of `P(|X - y| >= dist(y, preds))` with `X`
/// uniform on the zone.
fn zone_recall(zone: &Span, truth: &Span, preds: &[Span]) -> f64 {
    let width = zone.len();
    let nearest = |y: f64| preds.iter().map(|p| dist_to_span(y, p)).fold(f64::INFINITY, f64::min);
    let integrand = |y: f64| {
        let d = nearest(y);
        let reach = (y + d).min(zone.hi) - (y - d).max(zone.lo);
        1.0 - reach / width
    };
    let mut kinks = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for c in [p.lo, p.hi] {
            kinks.extend([c, 0.5 * (c + zone.lo), 0.5 * (c + zone.hi)]);
        }
        if let Some(next) = preds.get(i + 1) {
            kinks.push(0.5 * (p.hi + next.lo));
        }
    }
    integrate(truth.lo, truth.hi, &mut kinks, integrand) / truth.len()
}

/// Affiliation precision, recall and F1 of `pred` against `truth` on `[0, len)`.
pub fn affiliation_metrics(pred: &[EventInterval], truth: &[EventInterval], len: usize) -> Result<AffiliationResult> {
    if truth.is_empty() {
        return Err(invalid("affiliation metrics are undefined without ground-truth events"));
    }
    let truth = to_spans(truth, len, "truth")?;
    let pred = to_spans(pred, len, "predicted")?;

    let mut zones = Vec::with_capacity(truth.len());
    for (j, t) in truth.iter().enumerate() {
        let lo = if j == 0 { 0.0 } else { 0.5 * (truth[j - 1].hi + t.lo) };
        let hi = if j + 1 == truth.len() {
            len as f64
        } else {
            0.5 * (t.hi + truth[j + 1].lo)
        };
        let zone = Span { lo, hi };
        let inside: Vec<Span> = pred.iter().filter_map(|p| p.intersect(&zone)).collect();
        if inside.is_empty() {
            zones.push((None, 0.0));
        } else {
            zones.push((Some(zone_precision(&zone, t, &inside)), zone_recall(&zone, t, &inside)));
        }
    }

    let with_pred: Vec<f64> = zones.iter().filter_map(|z| z.0).collect();
    let precision_defined = !with_pred.is_empty();
    let precision = if precision_defined {
        with_pred.iter().sum::<f64>() / with_pred.len() as f64
    } else {
        0.0
    };
    let recall = zones.iter().map(|z| z.1).sum::<f64>() / zones.len() as f64;
    let f1 = if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(AffiliationResult {
        precision,
        recall,
        f1,
        precision_defined,
        zones,
    })
}
