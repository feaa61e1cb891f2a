//! Inference-time scoring, threshold selection and event-level evaluation.

mod affiliation;
mod pot;

pub use affiliation::{affiliation_metrics, AffiliationResult, EventInterval};
pub use pot::{fit_gpd, pot_threshold, quantile, GpdFit, PotConfig, PotResult};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, history_at, Decomposition, ModelState};
use crate::series::Series;
use crate::tensor::Tensor;
use crate::trainer::window_offsets;

/// One nonnegative anomaly score per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub scores: Vec<f64>,
}

impl ScoreTrace {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn normalized_values(series: &Series, state: &ModelState) -> Result<Tensor> {
    if series.dims() != state.config.features {
        return Err(Error::Shape {
            op: "series features vs model",
            lhs: vec![series.len(), series.dims()],
            rhs: vec![state.config.window, state.config.features],
        });
    }
    Ok(state.normalizer.apply(&series.values))
}

/// Forward pass over non-overlapping windows (stride `W`, tail window pulled
/// back to end at the last row), each with its preceding rows as HP history.
///
/// Returns `(offset, decomposition, normalized window)` in offset order.
pub fn reconstruct(series: &Series, state: &ModelState) -> Result<Vec<(usize, Decomposition, Tensor)>> {
    let values = normalized_values(series, state)?;
    let w = state.config.window;
    let offsets = window_offsets(values.rows(), w, w)?;
    offsets
        .par_iter()
        .map(|&o| {
            let window = values.slice_rows(o, o + w);
            let dec = forward(&window, state, &history_at(&values, o, &state.config))?;
            Ok((o, dec, window))
        })
        .collect()
}

/// Per-timestep mean over features of the squared reconstruction error, in
/// normalized units. Rows covered by two windows keep the later window's score.
pub fn score(series: &Series, state: &ModelState) -> Result<ScoreTrace> {
    let mut scores = vec![0.0; series.len()];
    let d = state.config.features as f64;
    for (o, dec, window) in reconstruct(series, state)? {
        for (r, slot) in scores[o..o + window.rows()].iter_mut().enumerate() {
            let sse: f64 = (0..window.cols())
                .map(|c| (window.get(r, c) - dec.reconstruction.get(r, c)).powi(2))
                .sum();
            *slot = sse / d;
        }
    }
    Ok(ScoreTrace { scores })
}

/// `1` where `score > threshold` (strict), with maximal runs as events.
pub fn binarize(scores: &ScoreTrace, threshold: f64) -> (Vec<u8>, Vec<EventInterval>) {
    let labels: Vec<u8> = scores.scores.iter().map(|&s| u8::from(s > threshold)).collect();
    let events = events_from_labels(&labels);
    (labels, events)
}

/// Maximal runs of nonzero labels as inclusive intervals.
pub fn events_from_labels(labels: &[u8]) -> Vec<EventInterval> {
    let mut events = Vec::new();
    let mut start = None;
    for (i, &l) in labels.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                events.push(EventInterval { start: s, end: i - 1 });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        events.push(EventInterval {
            start: s,
            end: labels.len() - 1,
        });
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_runs() {
        let trace = ScoreTrace {
            scores: vec![0.0, 5.0, 5.0, 0.0, 7.0],
        };
        let (labels, events) = binarize(&trace, 4.0);
        assert_eq!(labels, vec![0, 1, 1, 0, 1]);
        assert_eq!(
            events,
            vec![EventInterval { start: 1, end: 2 }, EventInterval { start: 4, end: 4 }]
        );
    }

    #[test]
    fn binarize_is_strict() {
        let trace = ScoreTrace {
            scores: vec![1.0, 4.0, 3.0],
        };
        let (labels, events) = binarize(&trace, 4.0);
        assert_eq!(labels, vec![0, 0, 0]);
        assert!(events.is_empty());
    }
}
