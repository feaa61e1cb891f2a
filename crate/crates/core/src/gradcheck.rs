//! Finite-difference checks of every differentiable op and of the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detrend::TrendSplit;
use crate::diff::{finite_difference_grad, ConvMode, ElementwiseOp, GradCheckReport, Graph, Var};
use crate::error::Result;
use crate::model::{forward_split, history_at, loss, loss_and_grads, trend_split, ModelConfig, ModelState};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    // Shape and data length agree by construction.
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Compares `d/dx_i sum(op(x) * r)` with central differences for each input,
/// where `r` is a fixed random weighting of the output.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<GradCheckReport>> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let weights = random(rng, &out_shape, 0.5, 1.5);
    let objective = |xs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w)?;
        let s = g.sum(prod)?;
        Ok((g, vars, s))
    };

    let (mut g, vars, s) = objective(inputs)?;
    g.backward(s)?;
    let mut reports = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                let (g, _, s) = objective(&xs)?;
                Ok(g.value(s).item())
            },
            x,
            STEP,
        )?;
        reports.push(GradCheckReport::compare(
            format!("{name}[{i}]"),
            &g.grad(vars[i]),
            &numeric,
        ));
    }
    Ok(reports)
}

/// One report per (op, input) pair; all should pass at [`OP_TOLERANCE`].
pub fn op_reports(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    let a = random(rng, &[3, 4], -1.0, 1.0);
    let b = random(rng, &[4, 2], -1.0, 1.0);
    out.extend(check_op("matmul", &[a, b], rng, |g, v| g.matmul(v[0], v[1]))?);

    let a = random(rng, &[5, 3], -2.0, 2.0);
    let b = random(rng, &[5, 3], -2.0, 2.0);
    let row = random(rng, &[3], -1.0, 1.0);
    for op in [ElementwiseOp::Add, ElementwiseOp::Sub, ElementwiseOp::Mul] {
        out.extend(check_op(&format!("{op:?}"), &[a.clone(), b.clone()], rng, |g, v| {
            g.elementwise(op, v[0], Some(v[1]))
        })?);
        out.extend(check_op(
            &format!("{op:?} broadcast"),
            &[a.clone(), row.clone()],
            rng,
            |g, v| g.elementwise(op, v[0], Some(v[1])),
        )?);
    }
    for op in [
        ElementwiseOp::Exp,
        ElementwiseOp::Silu,
        ElementwiseOp::Softplus,
        ElementwiseOp::Neg,
    ] {
        out.extend(check_op(&format!("{op:?}"), std::slice::from_ref(&a), rng, |g, v| {
            g.elementwise(op, v[0], None)
        })?);
    }
    out.extend(check_op("scale", std::slice::from_ref(&a), rng, |g, v| {
        g.scale(v[0], -2.5)
    })?);
    out.extend(check_op("sum", std::slice::from_ref(&a), rng, |g, v| g.sum(v[0]))?);
    out.extend(check_op("mean", &[a], rng, |g, v| g.mean(v[0]))?);

    let x = random(rng, &[10, 2], -1.0, 1.0);
    let k = random(rng, &[4, 2], -1.0, 1.0);
    out.extend(check_op("conv causal", &[x.clone(), k], rng, |g, v| {
        g.conv1d(v[0], v[1], ConvMode::DepthwiseCausal)
    })?);
    let k = random(rng, &[3, 2, 3], -1.0, 1.0);
    out.extend(check_op("conv same", &[x.clone(), k], rng, |g, v| {
        g.conv1d(v[0], v[1], ConvMode::CrossChannelSame)
    })?);
    for k in [2, 3, 4, 10] {
        out.extend(check_op(
            &format!("avg pool k={k}"),
            std::slice::from_ref(&x),
            rng,
            |g, v| g.avg_pool_same(v[0], k),
        )?);
    }

    let (w, d, n) = (6, 3, 2);
    let inputs = [
        random(rng, &[w, d], -1.0, 1.0),
        random(rng, &[w, d], 0.1, 1.0),
        random(rng, &[d, n], -2.0, -0.2),
        random(rng, &[w, n], -1.0, 1.0),
        random(rng, &[w, n], -1.0, 1.0),
    ];
    out.extend(check_op("selective scan", &inputs, rng, |g, v| {
        g.selective_scan(v[0], v[1], v[2], v[3], v[4])
    })?);
    Ok(out)
}

/// A 20x2 window through a model with `D_m = 4`, `N = 3`, `L = 2`.
///
/// Weights other than `a_log` are drawn from U(-1, 1): at init scale the
/// blocks are nearly inert and many gradient entries fall below what
/// step-1e-5 differences can resolve.
pub fn model_instance(seed: u64) -> Result<(ModelState, Tensor, TrendSplit)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        window: 20,
        features: 2,
        d_model: 4,
        n_state: 3,
        blocks: 2,
        ..ModelConfig::default()
    };
    let mut state = ModelState::init(cfg.clone(), &mut rng)?;
    for (name, t) in state.tensors_mut() {
        if !name.ends_with("a_log") {
            *t = random(&mut rng, t.shape(), -1.0, 1.0);
        }
    }
    let series = Tensor::from_fn(60, 2, |t, c| {
        (t as f64 * 0.6 + c as f64).sin() + 0.03 * t as f64 + rng.gen_range(-0.2..0.2)
    });
    let window = series.slice_rows(40, 60);
    let split = trend_split(&window, &history_at(&series, 40, &cfg), &cfg)?;
    Ok((state, window, split))
}

/// One report per parameter tensor of [`model_instance`]; all should pass at
/// [`MODEL_TOLERANCE`].
pub fn model_reports(seed: u64) -> Result<Vec<GradCheckReport>> {
    let (state, window, split) = model_instance(seed)?;
    let (_, grads) = loss_and_grads(&state, &window, &split)?;
    let mut out = Vec::new();
    for (i, (name, t)) in state.tensors().into_iter().enumerate() {
        let numeric = finite_difference_grad(
            |probe| {
                let mut s = state.clone();
                *s.tensors_mut()[i].1 = probe.clone();
                loss(&window, &forward_split(&split, &s)?)
            },
            t,
            STEP,
        )?;
        out.push(GradCheckReport::compare(name, &grads[i], &numeric));
    }
    Ok(out)
}
