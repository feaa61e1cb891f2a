//! Trend extraction: the Hodrick-Prescott filter and the adaptive
//! moving-average detrender whose kernel follows the dominant period.

use std::cell::RefCell;
use std::collections::VecDeque;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::diff::avg_pool_forward;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpConfig {
    /// Smoothness weight on the squared second differences.
    pub lambda: f64,
    /// How many preceding windows are prepended before filtering.
    pub history_windows: usize,
}

impl Default for HpConfig {
    fn default() -> Self {
        Self {
            lambda: 1e4,
            history_windows: 4,
        }
    }
}

impl HpConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(invalid(format!(
                "HP lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `trend + seasonality` reproduces the input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSplit {
    pub trend: Tensor,
    pub seasonality: Tensor,
}

/// Pentadiagonal SPD matrix with constant bands, factored as `L L^T`.
///
/// Only the three nonzero diagonals of `L` are stored.
struct BandedCholesky {
    diag: Vec<f64>,
    sub1: Vec<f64>,
    sub2: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the `m x m` Toeplitz matrix with main diagonal `d0`,
    /// first off-diagonal `d1` and second off-diagonal `d2`.
    fn factor(m: usize, d0: f64, d1: f64, d2: f64) -> Result<Self> {
        let mut diag = vec![0.0; m];
        let mut sub1 = vec![0.0; m];
        let mut sub2 = vec![0.0; m];
        for i in 0..m {
            if i >= 2 {
                sub2[i] = d2 / diag[i - 2];
            }
            if i >= 1 {
                let cross = if i >= 2 { sub2[i] * sub1[i - 1] } else { 0.0 };
                sub1[i] = (d1 - cross) / diag[i - 1];
            }
            let pivot = d0 - sub1[i] * sub1[i] - sub2[i] * sub2[i];
            if pivot <= 0.0 || !pivot.is_finite() {
                return Err(invalid("HP system is not positive definite"));
            }
            diag[i] = pivot.sqrt();
        }
        Ok(Self { diag, sub1, sub2 })
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let m = b.len();
        for i in 0..m {
            let mut v = b[i];
            if i >= 1 {
                v -= self.sub1[i] * b[i - 1];
            }
            if i >= 2 {
                v -= self.sub2[i] * b[i - 2];
            }
            b[i] = v / self.diag[i];
        }
        for i in (0..m).rev() {
            let mut v = b[i];
            if i + 1 < m {
                v -= self.sub1[i + 1] * b[i + 1];
            }
            if i + 2 < m {
                v -= self.sub2[i + 2] * b[i + 2];
            }
            b[i] = v / self.diag[i];
        }
    }
}

/// Hodrick-Prescott trend of every column of `x` (`T x D`, `T >= 3`).
///
/// The minimizer of `|x - tau|^2 + lambda |D2 tau|^2` is
/// `tau = x - lambda D2^T (I + lambda D2 D2^T)^{-1} D2 x`, which needs only the
/// `(T-2) x (T-2)` pentadiagonal system with bands `(1 + 6 lambda, -4 lambda, lambda)`.
/// Affine columns have `D2 x = 0` and come back unchanged.
pub fn hp_filter(x: &Tensor, lambda: f64) -> Result<Tensor> {
    let (t, d) = x.expect_2d("hp_filter")?;
    if t < 3 {
        return Err(invalid(format!("hp_filter needs at least 3 rows, got {t}")));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(invalid(format!("HP lambda must be finite and >= 0, got {lambda}")));
    }
    let mut trend = x.clone();
    if lambda == 0.0 {
        return Ok(trend);
    }
    let m = t - 2;
    let chol = BandedCholesky::factor(m, 1.0 + 6.0 * lambda, -4.0 * lambda, lambda)?;
    let xd = x.data();
    let mut rhs = vec![0.0; m];
    for col in 0..d {
        let at = |i: usize| xd[i * d + col];
        for (r, v) in rhs.iter_mut().enumerate() {
            *v = at(r) - 2.0 * at(r + 1) + at(r + 2);
        }
        chol.solve_in_place(&mut rhs);
        let out = trend.data_mut();
        for i in 0..t {
            let mut dz = 0.0;
            if i < m {
                dz += rhs[i];
            }
            if (1..=m).contains(&i) {
                dz -= 2.0 * rhs[i - 1];
            }
            if (2..m + 2).contains(&i) {
                dz += rhs[i - 2];
            }
            out[i * d + col] -= lambda * dz;
        }
    }
    Ok(trend)
}

/// Bounded FIFO of the most recent windows of one stream.
#[derive(Debug, Clone, Default)]
pub struct HistoryRing {
    capacity: usize,
    windows: VecDeque<Tensor>,
}

impl HistoryRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            windows: VecDeque::with_capacity(capacity),
        }
    }

    /// Pushes a window, evicting the oldest once full.
    pub fn push(&mut self, window: Tensor) {
        if self.capacity == 0 {
            return;
        }
        if self.windows.len() == self.capacity {
            self.windows.pop_front();
        }
        self.windows.push_back(window);
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.windows.clear();
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.windows.iter()
    }
}

/// HP split of `window` using the ring's windows (oldest first) as left context.
///
/// Only the last `W` rows of the filtered concatenation are returned. The ring
/// is not modified.
pub fn hp_split_with_history(window: &Tensor, history: &HistoryRing, cfg: &HpConfig) -> Result<TrendSplit> {
    let (w, _) = window.expect_2d("hp_split_with_history")?;
    if w < 3 {
        return Err(invalid(format!("window needs at least 3 rows, got {w}")));
    }
    let parts: Vec<&Tensor> = history.iter().chain(std::iter::once(window)).collect();
    let joined = Tensor::vstack(&parts)?;
    let full = hp_filter(&joined, cfg.lambda)?;
    let trend = full.slice_rows(joined.rows() - w, joined.rows());
    let seasonality = window.zip_map(&trend, |x, t| x - t)?;
    Ok(TrendSplit { trend, seasonality })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Channel-averaged power `|X_f|^2` for bins `0..=W/2`.
pub fn mean_power_spectrum(x: &Tensor) -> Result<Vec<f64>> {
    let (w, c) = x.expect_2d("power_spectrum")?;
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(w));
    let half = w / 2;
    let mut power = vec![0.0; half + 1];
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    for ch in 0..c {
        for (t, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(x.get(t, ch), 0.0);
        }
        fft.process(&mut buf);
        for (f, p) in power.iter_mut().enumerate() {
            *p += buf[f].norm_sqr();
        }
    }
    for p in &mut power {
        *p /= c as f64;
    }
    Ok(power)
}

/// Pooling width from the dominant frequency: `clamp(floor(W / n), 2, W)`
/// where `n` maximizes the channel-averaged power over bins `1..=W/2`.
///
/// Bins within `1e-12` of the total power of the peak count as tied and the
/// lowest such bin wins, so a flat spectrum yields `n = 1`.
pub fn estimate_period(x: &Tensor) -> Result<usize> {
    let (w, _) = x.expect_2d("estimate_period")?;
    if w < 4 {
        return Err(invalid(format!("estimate_period needs at least 4 rows, got {w}")));
    }
    let power = mean_power_spectrum(x)?;
    let total: f64 = power.iter().sum();
    let tol = 1e-12 * total;
    let peak = power[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = (1..power.len()).find(|&f| power[f] >= peak - tol).unwrap_or(1);
    Ok((w / n).clamp(2, w))
}

/// Adaptive moving-average split on plain values.
pub fn ama(x: &Tensor) -> Result<TrendSplit> {
    let k = estimate_period(x)?;
    let trend = avg_pool_forward(x, k)?;
    let seasonality = x.zip_map(&trend, |a, b| a - b)?;
    Ok(TrendSplit { trend, seasonality })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    /// Dense `(I + lambda D2^T D2) tau = x` by Gaussian elimination.
    fn dense_hp(x: &[f64], lambda: f64) -> Vec<f64> {
        let t = x.len();
        let mut a = vec![vec![0.0; t]; t];
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for r in 0..t - 2 {
            let coef = [1.0, -2.0, 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    a[r + i][r + j] += lambda * coef[i] * coef[j];
                }
            }
        }
        let mut b = x.to_vec();
        for col in 0..t {
            let piv = (col..t)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..t {
                let f = a[r][col] / a[col][col];
                for c in col..t {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut out = vec![0.0; t];
        for r in (0..t).rev() {
            let s: f64 = (r + 1..t).map(|c| a[r][c] * out[c]).sum();
            out[r] = (b[r] - s) / a[r][r];
        }
        out
    }

    #[test]
    fn matches_dense_solve() {
        let x: Vec<f64> = (0..23).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        for lambda in [0.5, 10.0, 1600.0] {
            let fast = hp_filter(&column(&x), lambda).unwrap();
            let slow = dense_hp(&x, lambda);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "lambda={lambda}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn three_point_minimum_size() {
        let x = column(&[0.0, 3.0, 0.0]);
        let fast = hp_filter(&x, 2.0).unwrap();
        let slow = dense_hp(&[0.0, 3.0, 0.0], 2.0);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(hp_filter(&column(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn rejects_negative_lambda() {
        assert!(hp_filter(&column(&[1.0, 2.0, 4.0]), -1.0).is_err());
        assert!(hp_filter(&column(&[1.0, 2.0, 4.0]), f64::NAN).is_err());
    }

    #[test]
    fn zero_lambda_is_identity() {
        let x = column(&[1.5, -2.0, 7.25, 0.0, 3.0]);
        assert_eq!(hp_filter(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn linear_input_is_fixed_point() {
        let x = column(&(0..50).map(|t| 2.0 * t as f64 + 1.0).collect::<Vec<_>>());
        for lambda in [1.0, 1e4, 1e8] {
            assert!(hp_filter(&x, lambda).unwrap().max_abs_diff(&x) <= 1e-9);
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut ring = HistoryRing::new(2);
        for v in 0..4 {
            ring.push(Tensor::full(&[1, 1], v as f64));
        }
        let kept: Vec<f64> = ring.iter().map(|t| t.item()).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
        let mut none = HistoryRing::new(0);
        none.push(Tensor::zeros(&[1, 1]));
        assert!(none.is_empty());
    }

    #[test]
    fn empty_history_equals_plain_filter() {
        let w = Tensor::from_fn(12, 2, |r, c| ((r * 3 + c) % 5) as f64);
        let cfg = HpConfig::default();
        let split = hp_split_with_history(&w, &HistoryRing::new(4), &cfg).unwrap();
        assert_eq!(split.trend, hp_filter(&w, cfg.lambda).unwrap());
    }

    #[test]
    fn constant_history_and_window() {
        let w = Tensor::full(&[10, 1], 3.0);
        let mut ring = HistoryRing::new(4);
        ring.push(w.clone());
        let split = hp_split_with_history(&w, &ring, &HpConfig::default()).unwrap();
        assert!(split.trend.data().iter().all(|&v| (v - 3.0).abs() < 1e-9));
        assert!(split.seasonality.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn period_needs_four_rows() {
        assert!(estimate_period(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn constant_signal_gives_full_window() {
        assert_eq!(estimate_period(&Tensor::full(&[100, 2], 4.2)).unwrap(), 100);
        assert_eq!(estimate_period(&Tensor::zeros(&[16, 1])).unwrap(), 16);
    }

    #[test]
    fn ama_on_constant() {
        let x = Tensor::full(&[20, 3], -7.0);
        let split = ama(&x).unwrap();
        assert_eq!(split.trend, x);
        assert!(split.seasonality.data().iter().all(|&v| v == 0.0));
    }
}
