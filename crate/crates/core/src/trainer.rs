//! Sliding windows, AdamW and the training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detrend::TrendSplit;
use crate::error::{invalid, Error, Result};
use crate::model::{history_at, loss_and_grads, trend_split, ModelConfig, ModelState};
use crate::series::{Normalizer, Series};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub stride: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 7,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stride: 1,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if self.stride == 0 || self.stride > window {
            return Err(invalid(format!("stride must be in 1..={window}, got {}", self.stride)));
        }
        let positive = [self.learning_rate, self.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("learning_rate and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(invalid("weight_decay and clip_norm must be >= 0"));
        }
        Ok(())
    }
}

/// Window start offsets `0, stride, 2 stride, ...`, plus a final window
/// ending at the last row when the regular grid leaves a tail uncovered.
pub fn window_offsets(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(invalid("window and stride must be positive"));
    }
    if len < window {
        return Err(invalid(format!(
            "series of length {len} is shorter than the window {window}"
        )));
    }
    let last = len - window;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    Ok(offsets)
}

/// A group of windows stacked as `B x W x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Tensor,
    pub offsets: Vec<usize>,
}

impl WindowBatch {
    pub fn window(&self, i: usize) -> Tensor {
        let s = self.windows.shape();
        let (w, d) = (s[1], s[2]);
        let data = self.windows.data()[i * w * d..(i + 1) * w * d].to_vec();
        Tensor::new(vec![w, d], data).expect("batch slice")
    }
}

/// Cuts `series` into windows in offset order and groups them into batches.
pub fn make_windows(series: &Series, window: usize, stride: usize, batch_size: usize) -> Result<Vec<WindowBatch>> {
    if batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    let offsets = window_offsets(series.len(), window, stride)?;
    let d = series.dims();
    Ok(offsets
        .chunks(batch_size)
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * window * d);
            for &o in chunk {
                data.extend_from_slice(series.values.slice_rows(o, o + window).data());
            }
            WindowBatch {
                windows: Tensor::new(vec![chunk.len(), window, d], data).expect("batch shape"),
                offsets: chunk.to_vec(),
            }
        })
        .collect())
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Moments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            second: first.clone(),
            first,
        }
    }
}

/// One AdamW update at step `t` (1-based).
///
/// Decay is applied first, `theta -= lr * wd * theta`, then the
/// bias-corrected adaptive step. Parameters whose name ends in `a_log` are
/// not decayed.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    moments: &mut Moments,
    cfg: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(invalid("AdamW step index starts at 1"));
    }
    if grads.len() != params.len() || moments.first.len() != params.len() {
        return Err(invalid("parameter, gradient and moment counts differ"));
    }
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of `{name}`")));
        }
        let decay = if name.ends_with("a_log") { 0.0 } else { cfg.weight_decay };
        let m = moments.first[i].data_mut();
        let v = moments.second[i].data_mut();
        for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *theta -= cfg.learning_rate * decay * *theta;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if !p.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("parameter `{name}` after update")));
        }
    }
    Ok(())
}

/// Scales `grads` to the given global L2 norm if they exceed it. Returns
/// whether clipping happened.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale(s);
        }
        true
    } else {
        false
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
}

/// A window of the normalized training series with its fixed HP split.
struct Sample {
    window: Tensor,
    split: TrendSplit,
}

/// Loss and gradient summed over `batch` in index order.
fn batch_gradients(state: &ModelState, samples: &[Sample], batch: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let per_window: Vec<Result<(f64, Vec<Tensor>)>> = batch
        .par_iter()
        .map(|&i| loss_and_grads(state, &samples[i].window, &samples[i].split))
        .collect();
    let mut total_loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in per_window {
        let (l, grads) = r?;
        total_loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    Ok((total_loss, total.unwrap_or_default()))
}

pub fn train(series: &Series, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(series, mcfg, tcfg, |_| {})
}

/// Trains from scratch, calling `on_epoch` after every epoch.
///
/// Runs are reproducible: the seed fixes initialization and shuffling, and
/// per-window gradients are reduced in batch order.
pub fn train_with(
    series: &Series,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut mcfg = mcfg.clone();
    mcfg.features = series.dims();
    mcfg.validate()?;
    tcfg.validate(mcfg.window)?;

    let normalizer = Normalizer::fit(&series.values);
    let values = normalizer.apply(&series.values);
    let offsets = window_offsets(values.rows(), mcfg.window, tcfg.stride)?;
    // The HP split depends only on the data at each offset, so it is computed once.
    let samples: Vec<Sample> = offsets
        .par_iter()
        .map(|&o| {
            let window = values.slice_rows(o, o + mcfg.window);
            let split = trend_split(&window, &history_at(&values, o, &mcfg), &mcfg)?;
            Ok(Sample { window, split })
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut state = ModelState::init(mcfg, &mut rng)?;
    state.normalizer = normalizer;
    let mut moments = Moments::zeros_like(state.tensors().into_iter().map(|(_, t)| t));
    let mut step = 0u64;
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut initial_loss = None;

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut clipped_steps = 0;
        for batch in order.chunks(tcfg.batch_size) {
            let (batch_loss, mut grads) = batch_gradients(&state, &samples, batch)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale(inv));
            if clip_global_norm(&mut grads, tcfg.clip_norm) {
                clipped_steps += 1;
            }
            step += 1;
            let mut params = state.tensors_mut();
            adamw_step(&mut params, &grads, &mut moments, tcfg, step)?;
        }
        let mean_loss = loss_sum / samples.len() as f64;
        let initial = *initial_loss.get_or_insert(mean_loss);
        if initial > 0.0 && mean_loss > 1e6 * initial {
            return Err(Error::Diverged(format!(
                "epoch {epoch} loss {mean_loss:e} exceeds 1e6 x initial {initial:e}"
            )));
        }
        let record = EpochRecord {
            epoch,
            mean_loss,
            wall_ms: started.elapsed().as_millis() as u64,
            clipped_steps,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_examples() {
        assert_eq!(window_offsets(100, 100, 1).unwrap(), vec![0]);
        assert_eq!(window_offsets(10, 4, 3).unwrap(), vec![0, 3, 6]);
        assert_eq!(window_offsets(10, 4, 4).unwrap(), vec![0, 4, 6]);
        assert!(window_offsets(3, 4, 1).is_err());
    }

    #[test]
    fn batches_keep_offset_order() {
        let series = Series::from_values(Tensor::from_fn(10, 2, |r, c| (r * 10 + c) as f64)).unwrap();
        let batches = make_windows(&series, 4, 2, 2).unwrap();
        let offsets: Vec<Vec<usize>> = batches.iter().map(|b| b.offsets.clone()).collect();
        assert_eq!(offsets, vec![vec![0, 2], vec![4, 6]]);
        assert_eq!(batches[1].windows.shape(), &[2, 4, 2]);
        assert_eq!(batches[1].window(1).get(0, 1), 61.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = Tensor::full(&[2, 2], 0.5);
        let before = p.clone();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let grads = vec![Tensor::zeros(&[2, 2])];
        let mut moments = Moments::zeros_like([&p]);
        for t in 1..=3 {
            adamw_step(&mut [("w".into(), &mut p)], &grads, &mut moments, &cfg, t).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = Tensor::scalar(0.0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut moments = Moments::zeros_like([&p]);
        let g = vec![Tensor::scalar(-3.0)];
        let mut prev = 0.0;
        for t in 1..=200 {
            adamw_step(&mut [("w".into(), &mut p)], &g, &mut moments, &cfg, t).unwrap();
            let delta = p.item() - prev;
            prev = p.item();
            assert!(delta > 0.0);
            assert!((delta - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut moments = Moments::zeros_like([&p]);
        let err = adamw_step(
            &mut [("blocks.0.w1".into(), &mut p)],
            &[Tensor::scalar(f64::NAN)],
            &mut moments,
            &TrainConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("blocks.0.w1"));
    }

    #[test]
    fn clipping_rescales_to_norm() {
        let mut g = vec![Tensor::full(&[1], 3.0), Tensor::full(&[1], 4.0)];
        assert!(clip_global_norm(&mut g, 1.0));
        assert!((g[0].item() - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
        assert!(!clip_global_norm(&mut g, 2.0));
    }

    #[test]
    fn stride_bounds() {
        let cfg = TrainConfig {
            stride: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10).is_err());
        let cfg = TrainConfig {
            stride: 11,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(10).is_err());
    }
}
