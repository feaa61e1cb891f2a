//! The full detector: HP split, embedding, `L` blocks of Mamba + adaptive
//! moving average, seasonal projection and trend fusion.
//!
//! Everything here works in normalized units; [`Normalizer`] sits at the
//! boundary in the trainer and detector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detrend::{estimate_period, hp_split_with_history, HistoryRing, HpConfig, TrendSplit};
use crate::diff::{ConvMode, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::series::Normalizer;
use crate::ssm::{fan_in_uniform, mamba_block_graph, MambaParams, MambaVars};
use crate::tensor::Tensor;

/// Kernel width of the trend-fusion convolution.
pub const FUSION_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window: usize,
    /// Input features; filled in from the training data.
    pub features: usize,
    pub d_model: usize,
    pub n_state: usize,
    pub blocks: usize,
    pub lambda: f64,
    pub history_windows: usize,
    /// Remove the HP trend before the blocks. Off means `tau_HP = 0`.
    pub use_hp: bool,
    /// Split a moving-average trend off after every Mamba block.
    pub use_ama: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 100,
            features: 1,
            d_model: 32,
            n_state: 16,
            blocks: 3,
            lambda: 1e4,
            history_windows: 4,
            use_hp: true,
            use_ama: true,
        }
    }
}

impl ModelConfig {
    pub fn hp(&self) -> HpConfig {
        HpConfig {
            lambda: self.lambda,
            history_windows: self.history_windows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 8 {
            return Err(invalid(format!("window must be >= 8, got {}", self.window)));
        }
        for (name, v) in [
            ("features", self.features),
            ("d_model", self.d_model),
            ("n_state", self.n_state),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        self.hp().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub normalizer: Normalizer,
    /// `D x D_m`.
    pub embed: Tensor,
    pub blocks: Vec<MambaParams>,
    /// `D_m x D`.
    pub w_s: Tensor,
    /// `3 x D_m x D`.
    pub fusion_kernel: Tensor,
}

impl ModelState {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, dm) = (config.features, config.d_model);
        let embed = fan_in_uniform(rng, &[d, dm], d);
        let blocks = (0..config.blocks)
            .map(|_| MambaParams::init(dm, config.n_state, rng))
            .collect();
        let w_s = fan_in_uniform(rng, &[dm, d], dm);
        let fusion_kernel = fan_in_uniform(rng, &[FUSION_WIDTH, dm, d], FUSION_WIDTH * dm);
        Ok(Self {
            normalizer: Normalizer::identity(d),
            config,
            embed,
            blocks,
            w_s,
            fusion_kernel,
        })
    }

    /// Every trainable tensor with a stable dotted name, in binding order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            v.extend(b.tensors().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        v.push(("w_s".to_string(), &self.w_s));
        v.push(("fusion_kernel".to_string(), &self.fusion_kernel));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("embed".to_string(), &mut self.embed)];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            v.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("blocks.{l}.{n}"), t)));
        }
        v.push(("w_s".to_string(), &mut self.w_s));
        v.push(("fusion_kernel".to_string(), &mut self.fusion_kernel));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let embed = leaf(g, &self.embed);
        let blocks = self.blocks.iter().map(|b| b.bind(g, trainable)).collect();
        let w_s = leaf(g, &self.w_s);
        let fusion_kernel = leaf(g, &self.fusion_kernel);
        ModelVars {
            embed,
            blocks,
            w_s,
            fusion_kernel,
        }
    }
}

pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<MambaVars>,
    pub w_s: Var,
    pub fusion_kernel: Var,
}

impl ModelVars {
    /// Same order as [`ModelState::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.all());
        }
        v.push(self.w_s);
        v.push(self.fusion_kernel);
        v
    }
}

/// Intermediate traces of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub tau_hp: Tensor,
    pub s_hp: Tensor,
    /// One `W x D_m` moving-average trend per block.
    pub tau_ma_per_block: Vec<Tensor>,
    /// Pooling width chosen in each block.
    pub periods: Vec<usize>,
    pub tau_fused: Tensor,
    pub seasonal: Tensor,
    pub reconstruction: Tensor,
}

/// Graph handles for the pieces of a [`Decomposition`].
pub struct ForwardVars {
    pub tau_hp: Var,
    pub s_hp: Var,
    pub tau_ma: Vec<Var>,
    pub periods: Vec<usize>,
    pub tau_fused: Var,
    pub seasonal: Var,
    pub reconstruction: Var,
}

impl ForwardVars {
    pub fn decomposition(&self, g: &Graph, cfg: &ModelConfig) -> Decomposition {
        let zeros = Tensor::zeros(&[cfg.window, cfg.d_model]);
        Decomposition {
            tau_hp: g.value(self.tau_hp).clone(),
            s_hp: g.value(self.s_hp).clone(),
            tau_ma_per_block: if self.tau_ma.is_empty() {
                vec![zeros; cfg.blocks]
            } else {
                self.tau_ma.iter().map(|&v| g.value(v).clone()).collect()
            },
            periods: self.periods.clone(),
            tau_fused: g.value(self.tau_fused).clone(),
            seasonal: g.value(self.seasonal).clone(),
            reconstruction: g.value(self.reconstruction).clone(),
        }
    }
}

fn check_window(window: &Tensor, cfg: &ModelConfig) -> Result<()> {
    if window.shape() != [cfg.window, cfg.features] {
        return Err(Error::Shape {
            op: "model window",
            lhs: window.shape().to_vec(),
            rhs: vec![cfg.window, cfg.features],
        });
    }
    Ok(())
}

/// HP split of a window, or an all-zero trend when HP detrending is off.
pub fn trend_split(window: &Tensor, history: &HistoryRing, cfg: &ModelConfig) -> Result<TrendSplit> {
    check_window(window, cfg)?;
    if cfg.use_hp {
        hp_split_with_history(window, history, &cfg.hp())
    } else {
        Ok(TrendSplit {
            trend: Tensor::zeros(window.shape()),
            seasonality: window.clone(),
        })
    }
}

/// History ring for the window starting at `offset` of `values`: the
/// preceding rows cut into window-sized chunks, at most `history_windows` of them.
pub fn history_at(values: &Tensor, offset: usize, cfg: &ModelConfig) -> HistoryRing {
    let mut ring = HistoryRing::new(cfg.history_windows);
    let start = offset.saturating_sub(cfg.history_windows * cfg.window);
    let mut chunk_end = offset;
    let mut chunks = Vec::new();
    while chunk_end > start {
        let chunk_start = chunk_end.saturating_sub(cfg.window).max(start);
        chunks.push(values.slice_rows(chunk_start, chunk_end));
        chunk_end = chunk_start;
    }
    for c in chunks.into_iter().rev() {
        ring.push(c);
    }
    ring
}

/// Builds the forward pass on `g` from a precomputed trend split.
pub fn forward_graph(g: &mut Graph, vars: &ModelVars, cfg: &ModelConfig, split: &TrendSplit) -> Result<ForwardVars> {
    let tau_hp = g.constant(split.trend.clone());
    let s_hp = g.constant(split.seasonality.clone());
    let mut y = g.matmul(s_hp, vars.embed)?;
    let mut tau_ma = Vec::new();
    let mut periods = Vec::new();
    for block in &vars.blocks {
        // The gated block is roughly quadratic in its input, so without the
        // skip path a stack of blocks collapses small activations to zero.
        let inner = mamba_block_graph(g, y, block)?;
        let x_ssm = g.add(y, inner)?;
        if cfg.use_ama {
            // The pooling width is read off the values and stays constant for
            // differentiation.
            let k = estimate_period(g.value(x_ssm))?;
            let trend = g.avg_pool_same(x_ssm, k)?;
            y = g.sub(x_ssm, trend)?;
            tau_ma.push(trend);
            periods.push(k);
        } else {
            y = x_ssm;
        }
    }
    let seasonal = g.matmul(y, vars.w_s)?;
    let tau_fused = match tau_ma.split_first() {
        Some((&first, rest)) => {
            let mut total = first;
            for &t in rest {
                total = g.add(total, t)?;
            }
            let fused = g.conv1d(total, vars.fusion_kernel, ConvMode::CrossChannelSame)?;
            g.add(tau_hp, fused)?
        }
        None => tau_hp,
    };
    let reconstruction = g.add(seasonal, tau_fused)?;
    Ok(ForwardVars {
        tau_hp,
        s_hp,
        tau_ma,
        periods,
        tau_fused,
        seasonal,
        reconstruction,
    })
}

/// Mean squared reconstruction error as a graph node.
pub fn loss_graph(g: &mut Graph, window: &Tensor, reconstruction: Var) -> Result<Var> {
    let target = g.constant(window.clone());
    let diff = g.sub(target, reconstruction)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// Runs the detector on one normalized window.
pub fn forward(window: &Tensor, state: &ModelState, history: &HistoryRing) -> Result<Decomposition> {
    let split = trend_split(window, history, &state.config)?;
    forward_split(&split, state)
}

pub fn forward_split(split: &TrendSplit, state: &ModelState) -> Result<Decomposition> {
    let mut g = Graph::new();
    let vars = state.bind(&mut g, false);
    let fv = forward_graph(&mut g, &vars, &state.config, split)?;
    Ok(fv.decomposition(&g, &state.config))
}

/// Mean over all `W x D` entries of the squared reconstruction error.
pub fn loss(window: &Tensor, dec: &Decomposition) -> Result<f64> {
    if window.shape() != dec.reconstruction.shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: window.shape().to_vec(),
            rhs: dec.reconstruction.shape().to_vec(),
        });
    }
    let sse: f64 = window
        .data()
        .iter()
        .zip(dec.reconstruction.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / window.len() as f64)
}

/// Loss of one window and the gradient of every parameter, in
/// [`ModelState::tensors`] order.
pub fn loss_and_grads(state: &ModelState, window: &Tensor, split: &TrendSplit) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = state.bind(&mut g, true);
    let fv = forward_graph(&mut g, &vars, &state.config, split)?;
    let l = loss_graph(&mut g, window, fv.reconstruction)?;
    g.backward(l)?;
    let grads = vars.all().into_iter().map(|v| g.grad(v)).collect();
    Ok((g.value(l).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            window: 20,
            features: 2,
            d_model: 4,
            n_state: 3,
            blocks: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.window = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn zero_network_reconstructs_hp_trend() {
        let cfg = small_config();
        let mut state = ModelState::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, t) in state.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let window = Tensor::from_fn(20, 2, |r, c| (r as f64 * 0.7 + c as f64).sin());
        let dec = forward(&window, &state, &HistoryRing::new(4)).unwrap();
        assert!(dec.seasonal.data().iter().all(|&v| v == 0.0));
        assert_eq!(dec.reconstruction, dec.tau_hp);
        let expected = dec.s_hp.data().iter().map(|v| v * v).sum::<f64>() / 40.0;
        assert!((loss(&window, &dec).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_window_has_zero_loss() {
        let cfg = small_config();
        let state = ModelState::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let window = Tensor::full(&[20, 2], 0.0);
        let dec = forward(&window, &state, &HistoryRing::new(4)).unwrap();
        assert_eq!(loss(&window, &dec).unwrap(), 0.0);
    }

    #[test]
    fn decomposition_identity_is_exact() {
        let cfg = small_config();
        let state = ModelState::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let window = Tensor::from_fn(20, 2, |r, c| ((r * 5 + c * 3) % 7) as f64 - 3.0);
        let dec = forward(&window, &state, &HistoryRing::new(4)).unwrap();
        let sum = dec.seasonal.zip_map(&dec.tau_fused, |a, b| a + b).unwrap();
        assert_eq!(sum, dec.reconstruction);
        assert_eq!(dec.tau_ma_per_block.len(), 2);
        assert_eq!(dec.periods.len(), 2);
    }

    #[test]
    fn loss_values() {
        let window = Tensor::zeros(&[100, 2]);
        let dec = Decomposition {
            tau_hp: Tensor::zeros(&[100, 2]),
            s_hp: Tensor::zeros(&[100, 2]),
            tau_ma_per_block: vec![],
            periods: vec![],
            tau_fused: Tensor::zeros(&[100, 2]),
            seasonal: Tensor::zeros(&[100, 2]),
            reconstruction: Tensor::full(&[100, 2], 1.0),
        };
        assert_eq!(loss(&window, &dec).unwrap(), 1.0);
        assert!(loss(&Tensor::zeros(&[10, 2]), &dec).is_err());
    }

    #[test]
    fn history_chunks_precede_offset() {
        let cfg = ModelConfig {
            window: 10,
            history_windows: 2,
            ..small_config()
        };
        let values = Tensor::from_fn(50, 1, |r, _| r as f64);
        let ring = history_at(&values, 25, &cfg);
        let rows: Vec<Vec<f64>> = ring.iter().map(|t| t.data().to_vec()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].first(), Some(&5.0));
        assert_eq!(rows[1].last(), Some(&24.0));
        assert!(history_at(&values, 0, &cfg).is_empty());
        let short = history_at(&values, 4, &cfg);
        assert_eq!(short.len(), 1);
        assert_eq!(short.iter().next().unwrap().rows(), 4);
    }

    #[test]
    fn ablations_change_structure() {
        let mut cfg = small_config();
        cfg.use_hp = false;
        cfg.use_ama = false;
        let state = ModelState::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let window = Tensor::from_fn(20, 2, |r, _| r as f64);
        let dec = forward(&window, &state, &HistoryRing::new(4)).unwrap();
        assert!(dec.tau_hp.data().iter().all(|&v| v == 0.0));
        assert_eq!(dec.s_hp, window);
        assert!(dec.periods.is_empty());
        assert_eq!(dec.tau_fused, dec.tau_hp);
    }
}
