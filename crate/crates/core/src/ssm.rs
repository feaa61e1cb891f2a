//! Selective state-space scan and the Mamba block around it.

use rand::Rng;

use crate::diff::{ConvMode, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel width of the causal depthwise convolution in front of the scan.
pub const CONV_WIDTH: usize = 4;

/// Half-width of the uniform init of the step-size projection.
pub const DELTA_INIT: f64 = 0.05;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

pub(crate) fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

/// Parameters of one selective scan with `D` inner channels and `N` states.
///
/// The state matrix is stored as `a_log` with `A = -exp(a_log)`, which keeps
/// every entry of `A` strictly negative under any update.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Params {
    pub a_log: Tensor,
    pub w_delta: Tensor,
    pub w_b: Tensor,
    pub w_c: Tensor,
}

impl S6Params {
    pub fn init(d_inner: usize, n_state: usize, rng: &mut impl Rng) -> Self {
        Self {
            a_log: Tensor::from_fn(d_inner, n_state, |_, n| ((n + 1) as f64).ln()),
            w_delta: uniform(rng, &[d_inner, d_inner], DELTA_INIT),
            w_b: fan_in_uniform(rng, &[d_inner, n_state], d_inner),
            w_c: fan_in_uniform(rng, &[d_inner, n_state], d_inner),
        }
    }

    /// The continuous-time diagonal state matrix `A = -exp(a_log)`, `D x N`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> S6Vars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        S6Vars {
            a_log: leaf(&self.a_log),
            w_delta: leaf(&self.w_delta),
            w_b: leaf(&self.w_b),
            w_c: leaf(&self.w_c),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("a_log", &self.a_log),
            ("w_delta", &self.w_delta),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("a_log", &mut self.a_log),
            ("w_delta", &mut self.w_delta),
            ("w_b", &mut self.w_b),
            ("w_c", &mut self.w_c),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct S6Vars {
    pub a_log: Var,
    pub w_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
}

impl S6Vars {
    pub fn all(&self) -> [Var; 4] {
        [self.a_log, self.w_delta, self.w_b, self.w_c]
    }
}

/// Projections, convolution and scan of one Mamba block with model width `D_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaParams {
    /// Gate projection, `D_m x 2D_m`.
    pub w1: Tensor,
    /// Scan-branch projection, `D_m x 2D_m`.
    pub w2: Tensor,
    /// Output projection, `2D_m x D_m`.
    pub w3: Tensor,
    /// Depthwise causal kernel, `4 x 2D_m`.
    pub conv_kernel: Tensor,
    pub s6: S6Params,
}

impl MambaParams {
    pub fn init(d_model: usize, n_state: usize, rng: &mut impl Rng) -> Self {
        let d_inner = 2 * d_model;
        Self {
            w1: fan_in_uniform(rng, &[d_model, d_inner], d_model),
            w2: fan_in_uniform(rng, &[d_model, d_inner], d_model),
            w3: fan_in_uniform(rng, &[d_inner, d_model], d_inner),
            conv_kernel: fan_in_uniform(rng, &[CONV_WIDTH, d_inner], CONV_WIDTH),
            s6: S6Params::init(d_inner, n_state, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MambaVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let w1 = leaf(&self.w1);
        let w2 = leaf(&self.w2);
        let w3 = leaf(&self.w3);
        let conv_kernel = leaf(&self.conv_kernel);
        MambaVars {
            w1,
            w2,
            w3,
            conv_kernel,
            s6: self.s6.bind(g, trainable),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("w3", &self.w3),
            ("conv_kernel", &self.conv_kernel),
        ];
        v.extend(self.s6.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
            ("w3", &mut self.w3),
            ("conv_kernel", &mut self.conv_kernel),
        ];
        v.extend(self.s6.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MambaVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub conv_kernel: Var,
    pub s6: S6Vars,
}

impl MambaVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w1, self.w2, self.w3, self.conv_kernel];
        v.extend(self.s6.all());
        v
    }
}

/// Zero-order-hold transition and Euler input matrices, both `W x D x N`:
/// `A_bar[t,d,n] = exp(delta[t,d] A[d,n])`, `B_bar[t,d,n] = delta[t,d] B[t,n]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (w, d) = delta.expect_2d("discretize")?;
    let (da, n) = a.expect_2d("discretize")?;
    let (wb, nb) = b.expect_2d("discretize")?;
    if da != d {
        return Err(Error::Shape {
            op: "discretize (delta vs A)",
            lhs: delta.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    if wb != w || nb != n {
        return Err(Error::Shape {
            op: "discretize (B)",
            lhs: vec![w, n],
            rhs: b.shape().to_vec(),
        });
    }
    let mut a_bar = Vec::with_capacity(w * d * n);
    let mut b_bar = Vec::with_capacity(w * d * n);
    for t in 0..w {
        for di in 0..d {
            let dt = delta.get(t, di);
            for ni in 0..n {
                a_bar.push((dt * a.get(di, ni)).exp());
                b_bar.push(dt * b.get(t, ni));
            }
        }
    }
    Ok((Tensor::new(vec![w, d, n], a_bar)?, Tensor::new(vec![w, d, n], b_bar)?))
}

/// Input-dependent step sizes and projections of the scan.
pub struct SelectiveInputs {
    pub delta: Var,
    pub b: Var,
    pub c: Var,
    pub a: Var,
}

/// `delta = softplus(u W_delta)`, `B = u W_B`, `C = u W_C`, `A = -exp(a_log)`.
pub fn selective_inputs(g: &mut Graph, u: Var, p: &S6Vars) -> Result<SelectiveInputs> {
    let pre = g.matmul(u, p.w_delta)?;
    let delta = g.softplus(pre)?;
    let b = g.matmul(u, p.w_b)?;
    let c = g.matmul(u, p.w_c)?;
    let ea = g.exp(p.a_log)?;
    let a = g.neg(ea)?;
    Ok(SelectiveInputs { delta, b, c, a })
}

/// S6 over `u` (`W x D`): selective projections, discretization and the
/// sequential recurrence from `h_0 = 0`.
pub fn s6_scan_graph(g: &mut Graph, u: Var, p: &S6Vars) -> Result<Var> {
    let s = selective_inputs(g, u, p)?;
    g.selective_scan(u, s.delta, s.a, s.b, s.c)
}

/// `(SiLU(x W1) ⊙ S6(SiLU(conv(x W2)))) W3`.
pub fn mamba_block_graph(g: &mut Graph, x: Var, p: &MambaVars) -> Result<Var> {
    let xw2 = g.matmul(x, p.w2)?;
    let conv = g.conv1d(xw2, p.conv_kernel, ConvMode::DepthwiseCausal)?;
    let u = g.silu(conv)?;
    let xw1 = g.matmul(x, p.w1)?;
    let gate = g.silu(xw1)?;
    let z = s6_scan_graph(g, u, &p.s6)?;
    let gated = g.mul(gate, z)?;
    g.matmul(gated, p.w3)
}

pub fn s6_scan(u: &Tensor, params: &S6Params) -> Result<Tensor> {
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let vars = params.bind(&mut g, false);
    let y = s6_scan_graph(&mut g, uv, &vars)?;
    Ok(g.value(y).clone())
}

pub fn mamba_block(x: &Tensor, params: &MambaParams) -> Result<Tensor> {
    let (_, d) = x.expect_2d("mamba_block")?;
    if d != params.d_model() {
        return Err(Error::Shape {
            op: "mamba_block",
            lhs: x.shape().to_vec(),
            rhs: params.w1.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.bind(&mut g, false);
    let y = mamba_block_graph(&mut g, xv, &vars)?;
    Ok(g.value(y).clone())
}
