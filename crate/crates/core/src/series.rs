use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Multivariate series, `T x D` with one name per feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub names: Vec<String>,
    pub values: Tensor,
    /// Number of raw samples aggregated into each row.
    pub downsample: usize,
}

impl Series {
    pub fn new(names: Vec<String>, values: Tensor) -> Result<Self> {
        let (_, d) = values.expect_2d("series")?;
        if names.len() != d {
            return Err(invalid(format!("{} feature names for {d} columns", names.len())));
        }
        Ok(Self {
            names,
            values,
            downsample: 1,
        })
    }

    /// Unnamed series with columns `x0, x1, ...`.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let d = values.expect_2d("series")?.1;
        Self::new((0..d).map(|i| format!("x{i}")).collect(), values)
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }
}

/// Per-feature z-score statistics of a training series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Zero-variance columns get unit scale so they map to 0.
    pub fn fit(values: &Tensor) -> Self {
        let (t, d) = (values.rows(), values.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let m = (0..t).map(|r| values.get(r, c)).sum::<f64>() / t.max(1) as f64;
            let var = (0..t).map(|r| (values.get(r, c) - m).powi(2)).sum::<f64>() / t.max(1) as f64;
            mean[c] = m;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, values: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    /// Maps a level (trend or reconstruction) back to raw units.
    pub fn invert(&self, values: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.std[c] + self.mean[c];
        }
        out
    }

    /// Maps a zero-mean component (seasonality) back to raw units.
    pub fn invert_scale(&self, values: &Tensor) -> Tensor {
        let d = self.std.len();
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= self.std[i % d];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_must_match_columns() {
        assert!(Series::new(vec!["a".into()], Tensor::zeros(&[3, 2])).is_err());
        let s = Series::from_values(Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(s.names, vec!["x0", "x1"]);
    }

    #[test]
    fn normalizer_round_trip_and_constant_column() {
        let v = Tensor::from_fn(5, 2, |r, c| if c == 0 { r as f64 } else { 3.0 });
        let n = Normalizer::fit(&v);
        assert_eq!(n.std[1], 1.0);
        let z = n.apply(&v);
        assert!((0..5).all(|r| z.get(r, 1) == 0.0));
        assert!(n.invert(&z).max_abs_diff(&v) < 1e-12);
    }
}
