//! Peaks-over-threshold: generalized Pareto fit to the excesses over a high
//! empirical quantile, extrapolated to a target tail probability.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Below this many excesses the GPD fit is skipped.
pub const MIN_EXCESSES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotConfig {
    /// Target probability of exceeding the final threshold.
    pub risk: f64,
    /// Empirical quantile used as the initial peaks threshold.
    pub init_quantile: f64,
}

impl Default for PotConfig {
    fn default() -> Self {
        Self {
            risk: 1e-2,
            init_quantile: 0.98,
        }
    }
}

impl PotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_quantile > 0.0 && self.init_quantile < 1.0) {
            return Err(invalid(format!(
                "init_quantile must be in (0, 1), got {}",
                self.init_quantile
            )));
        }
        if !(self.risk > 0.0 && self.risk < 1.0) {
            return Err(invalid(format!("risk must be in (0, 1), got {}", self.risk)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    /// Shape.
    pub gamma: f64,
    /// Scale.
    pub sigma: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotResult {
    pub threshold: f64,
    /// The initial quantile threshold `t`.
    pub initial_threshold: f64,
    pub peaks: usize,
    pub fit: Option<GpdFit>,
    /// Set when there were too few peaks and the plain `1 - risk` quantile was used.
    pub fallback: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Profile log-likelihood in `theta = gamma / sigma`, for which the shape
/// maximizer is `gamma = mean(ln(1 + theta y))` and `sigma = gamma / theta`.
fn profile(excesses: &[f64], theta: f64) -> Option<GpdFit> {
    let n = excesses.len() as f64;
    if theta == 0.0 {
        let mean = excesses.iter().sum::<f64>() / n;
        return Some(GpdFit {
            gamma: 0.0,
            sigma: mean,
            log_likelihood: -n * mean.ln() - n,
        });
    }
    let mut acc = 0.0;
    for &y in excesses {
        let z = 1.0 + theta * y;
        if z <= 0.0 {
            return None;
        }
        acc += z.ln();
    }
    let gamma = acc / n;
    let sigma = gamma / theta;
    if !sigma.is_finite() || sigma <= 0.0 {
        return None;
    }
    Some(GpdFit {
        gamma,
        sigma,
        log_likelihood: -n * sigma.ln() - n * (1.0 + gamma),
    })
}

fn better(a: Option<GpdFit>, b: Option<GpdFit>) -> Option<GpdFit> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.log_likelihood > x.log_likelihood { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Golden-section maximization of the profile likelihood on `[lo, hi]`.
fn golden(excesses: &[f64], mut lo: f64, mut hi: f64) -> Option<GpdFit> {
    const R: f64 = 0.618_033_988_749_895;
    let ll = |t: f64| profile(excesses, t).map_or(f64::NEG_INFINITY, |f| f.log_likelihood);
    let mut c = hi - R * (hi - lo);
    let mut d = lo + R * (hi - lo);
    let (mut fc, mut fd) = (ll(c), ll(d));
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-12 * (lo.abs() + hi.abs()).max(f64::MIN_POSITIVE) {
            break;
        }
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - R * (hi - lo);
            fc = ll(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + R * (hi - lo);
            fd = ll(d);
        }
    }
    profile(excesses, 0.5 * (lo + hi))
}

/// Maximum-likelihood generalized Pareto fit of positive excesses.
///
/// A log-spaced grid over the admissible `theta` range (seeded with the
/// method-of-moments estimate and the exponential case `theta = 0`) brackets
/// the maximum, which golden-section search then refines.
pub fn fit_gpd(excesses: &[f64]) -> Result<GpdFit> {
    if excesses.is_empty() || excesses.iter().any(|&y| !y.is_finite() || y < 0.0) {
        return Err(invalid("GPD fit needs finite nonnegative excesses"));
    }
    let n = excesses.len() as f64;
    let mean = excesses.iter().sum::<f64>() / n;
    let max = excesses.iter().copied().fold(0.0, f64::max);
    if mean.is_nan() || mean <= 0.0 {
        return Err(invalid("GPD fit needs at least one positive excess"));
    }
    let var = excesses.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;

    let mut candidates: Vec<f64> = vec![0.0];
    if var > 0.0 {
        let gamma_mom = 0.5 * (1.0 - mean * mean / var);
        let sigma_mom = 0.5 * mean * (mean * mean / var + 1.0);
        candidates.push(gamma_mom / sigma_mom);
    }
    const STEPS: usize = 120;
    for i in 0..=STEPS {
        let e = -6.0 + 10.0 * i as f64 / STEPS as f64;
        candidates.push(10f64.powf(e) / mean);
        // Negative side must keep 1 + theta * max > 0.
        let r = 1.0 - 10f64.powf(-9.0 + 9.0 * i as f64 / STEPS as f64);
        if r > 0.0 {
            candidates.push(-r / max);
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let scored: Vec<(f64, f64)> = candidates
        .iter()
        .map(|&t| (t, profile(excesses, t).map_or(f64::NEG_INFINITY, |f| f.log_likelihood)))
        .collect();
    let best_idx = (0..scored.len())
        .max_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1))
        .expect("candidate grid is nonempty");
    let lo = scored[best_idx.saturating_sub(1)].0;
    let hi = scored[(best_idx + 1).min(scored.len() - 1)].0;
    let grid_best = profile(excesses, scored[best_idx].0);
    let refined = if hi > lo { golden(excesses, lo, hi) } else { None };
    better(grid_best, refined).ok_or_else(|| invalid("GPD likelihood has no admissible maximum"))
}

/// Alarm threshold for risk `q` from calibration scores.
///
/// `t` is the `init_quantile` empirical quantile and the peaks are the
/// excesses `s - t` for `s > t`. With `n` scores and `N_t` peaks the
/// threshold is `t + sigma/gamma ((q n / N_t)^(-gamma) - 1)`, or
/// `t + sigma ln(N_t / (q n))` when `|gamma| < 1e-8`. Fewer than
/// [`MIN_EXCESSES`] peaks falls back to the `1 - q` empirical quantile.
pub fn pot_threshold(calibration: &[f64], cfg: &PotConfig) -> Result<PotResult> {
    cfg.validate()?;
    if calibration.is_empty() {
        return Err(invalid("no calibration scores"));
    }
    if calibration.iter().any(|s| !s.is_finite()) {
        return Err(invalid("calibration scores must be finite"));
    }
    let mut sorted = calibration.to_vec();
    sorted.sort_by(f64::total_cmp);
    let t = quantile(&sorted, cfg.init_quantile);
    let peaks: Vec<f64> = sorted.iter().filter(|&&s| s > t).map(|&s| s - t).collect();
    if peaks.len() < MIN_EXCESSES {
        return Ok(PotResult {
            threshold: quantile(&sorted, 1.0 - cfg.risk),
            initial_threshold: t,
            peaks: peaks.len(),
            fit: None,
            fallback: true,
        });
    }
    let fit = fit_gpd(&peaks)?;
    let ratio = cfg.risk * sorted.len() as f64 / peaks.len() as f64;
    let threshold = if fit.gamma.abs() < 1e-8 {
        t - fit.sigma * ratio.ln()
    } else {
        t + fit.sigma / fit.gamma * (ratio.powf(-fit.gamma) - 1.0)
    };
    Ok(PotResult {
        threshold,
        initial_threshold: t,
        peaks: peaks.len(),
        fit: Some(fit),
        fallback: false,
    })
}
