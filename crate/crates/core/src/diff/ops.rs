use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};

use super::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    /// Hadamard product.
    Mul,
    Exp,
    Silu,
    Softplus,
    Neg,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" | "hadamard" => Self::Mul,
            "exp" => Self::Exp,
            "silu" => Self::Silu,
            "softplus" => Self::Softplus,
            "neg" => Self::Neg,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// `k x C` kernel, one filter per channel, `k - 1` zeros padded on the left.
    DepthwiseCausal,
    /// `k x C_in x C_out` kernel, `floor(k/2)` zeros on the left and the rest on the right.
    CrossChannelSame,
}

pub(crate) enum Op {
    Leaf,
    Matmul(Var, Var),
    Elementwise(ElementwiseOp, Var, Option<Var>),
    Scale(Var, f64),
    Conv1d { x: Var, kernel: Var, mode: ConvMode },
    AvgPool { x: Var, k: usize },
    Sum(Var),
    Mean(Var),
    Scan(ScanOp),
}

/// Selective scan with the hidden states kept for the backward sweep.
pub(crate) struct ScanOp {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    /// `h_t` for every step, `W x D x N`.
    states: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => vec![*a, *b],
            Op::Elementwise(_, a, b) => {
                let mut v = vec![*a];
                v.extend(b);
                v
            }
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Conv1d { x, kernel, .. } => vec![*x, *kernel],
            Op::AvgPool { x, .. } => vec![*x],
            Op::Scan(s) => vec![s.u, s.delta, s.a, s.b, s.c],
        }
    }

    pub(crate) fn backward(&self, g: &Graph, out: &Tensor, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        Ok(match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) => {
                let av = g.value(*a);
                let bv = g.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_into(grad.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_into(av.data(), grad.data(), &mut gb, m, k, n);
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Elementwise(tag, a, b) => elementwise_backward(g, *tag, *a, *b, out, grad)?,
            Op::Scale(a, s) => vec![(*a, grad.map(|v| v * s))],
            Op::Sum(a) => {
                let gv = grad.item();
                vec![(*a, Tensor::full(g.value(*a).shape(), gv))]
            }
            Op::Mean(a) => {
                let n = g.value(*a).len() as f64;
                vec![(*a, Tensor::full(g.value(*a).shape(), grad.item() / n))]
            }
            Op::Conv1d { x, kernel, mode } => conv1d_backward(g.value(*x), g.value(*kernel), *mode, grad)
                .map(|(gx, gk)| vec![(*x, gx), (*kernel, gk)])?,
            Op::AvgPool { x, k } => vec![(*x, avg_pool_backward(g.value(*x), *k, grad))],
            Op::Scan(s) => s.backward(g, grad)?,
        })
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && a.ends_with(b))
}

fn elementwise_backward(
    g: &Graph,
    tag: ElementwiseOp,
    a: Var,
    b: Option<Var>,
    out: &Tensor,
    grad: &Tensor,
) -> Result<Vec<(Var, Tensor)>> {
    let av = g.value(a);
    let res = match (tag, b) {
        (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, Some(b)) => {
            let bv = g.value(b);
            let period = bv.len();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; period];
            for (i, &gi) in grad.data().iter().enumerate() {
                let j = i % period;
                let (da, db) = match tag {
                    ElementwiseOp::Add => (gi, gi),
                    ElementwiseOp::Sub => (gi, -gi),
                    _ => (gi * bv.data()[j], gi * av.data()[i]),
                };
                ga[i] = da;
                gb[j] += db;
            }
            vec![
                (a, Tensor::new(av.shape().to_vec(), ga)?),
                (b, Tensor::new(bv.shape().to_vec(), gb)?),
            ]
        }
        (ElementwiseOp::Exp, None) => vec![(a, grad.zip_map(out, |gi, y| gi * y)?)],
        (ElementwiseOp::Neg, None) => vec![(a, grad.map(|gi| -gi))],
        (ElementwiseOp::Silu, None) => vec![(
            a,
            grad.zip_map(av, |gi, x| {
                let s = sigmoid(x);
                gi * (s + x * s * (1.0 - s))
            })?,
        )],
        (ElementwiseOp::Softplus, None) => vec![(a, grad.zip_map(av, |gi, x| gi * sigmoid(x))?)],
        _ => unreachable!("arity checked at construction"),
    };
    Ok(res)
}

fn conv_geometry(x: &Tensor, kernel: &Tensor, mode: ConvMode) -> Result<(usize, usize, usize, usize, usize)> {
    let (w, c_in) = x.expect_2d("conv1d")?;
    let ks = kernel.shape();
    let (k, c_out) = match mode {
        ConvMode::DepthwiseCausal => {
            if ks.len() != 2 || ks[1] != c_in {
                return Err(Error::Shape {
                    op: "conv1d depthwise-causal",
                    lhs: x.shape().to_vec(),
                    rhs: ks.to_vec(),
                });
            }
            (ks[0], c_in)
        }
        ConvMode::CrossChannelSame => {
            if ks.len() != 3 || ks[1] != c_in {
                return Err(Error::Shape {
                    op: "conv1d cross-channel-same",
                    lhs: x.shape().to_vec(),
                    rhs: ks.to_vec(),
                });
            }
            (ks[0], ks[2])
        }
    };
    if k == 0 || k > w {
        return Err(invalid(format!("conv1d kernel size {k} must be in 1..={w}")));
    }
    let pad_left = match mode {
        ConvMode::DepthwiseCausal => k - 1,
        ConvMode::CrossChannelSame => k / 2,
    };
    Ok((w, c_in, c_out, k, pad_left))
}

pub fn conv1d_forward(x: &Tensor, kernel: &Tensor, mode: ConvMode) -> Result<Tensor> {
    let (w, c_in, c_out, k, pad) = conv_geometry(x, kernel, mode)?;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; w * c_out];
    for t in 0..w {
        for j in 0..k {
            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < w) else {
                continue;
            };
            match mode {
                ConvMode::DepthwiseCausal => {
                    for c in 0..c_in {
                        out[t * c_out + c] += kd[j * c_in + c] * xd[s * c_in + c];
                    }
                }
                ConvMode::CrossChannelSame => {
                    for i in 0..c_in {
                        let xv = xd[s * c_in + i];
                        let krow = &kd[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                        for (o, kv) in out[t * c_out..(t + 1) * c_out].iter_mut().zip(krow) {
                            *o += kv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![w, c_out], out)
}

fn conv1d_backward(x: &Tensor, kernel: &Tensor, mode: ConvMode, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (w, c_in, c_out, k, pad) = conv_geometry(x, kernel, mode)?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gk = vec![0.0; kd.len()];
    for t in 0..w {
        for j in 0..k {
            let Some(s) = (t + j).checked_sub(pad).filter(|&s| s < w) else {
                continue;
            };
            match mode {
                ConvMode::DepthwiseCausal => {
                    for c in 0..c_in {
                        let go = gd[t * c_out + c];
                        gk[j * c_in + c] += go * xd[s * c_in + c];
                        gx[s * c_in + c] += go * kd[j * c_in + c];
                    }
                }
                ConvMode::CrossChannelSame => {
                    for i in 0..c_in {
                        let base = (j * c_in + i) * c_out;
                        let xv = xd[s * c_in + i];
                        let mut acc = 0.0;
                        for o in 0..c_out {
                            let go = gd[t * c_out + o];
                            gk[base + o] += go * xv;
                            acc += go * kd[base + o];
                        }
                        gx[s * c_in + i] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
    ))
}

/// Left replicate padding for a width-`k` window, `ceil((k-1)/2)`.
fn pool_left(k: usize) -> usize {
    k / 2
}

/// Value-level moving average shared by the graph op and non-differentiable callers.
pub fn avg_pool_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    let (w, c) = x.expect_2d("avg_pool_same")?;
    if k < 2 || k > w {
        return Err(invalid(format!("avg_pool kernel {k} must be in 2..={w}")));
    }
    let left = pool_left(k);
    let xd = x.data();
    let inv = 1.0 / k as f64;
    let mut out = vec![0.0; w * c];
    for t in 0..w {
        for j in 0..k {
            let s = (t + j).saturating_sub(left).min(w - 1);
            for ch in 0..c {
                out[t * c + ch] += xd[s * c + ch];
            }
        }
        for ch in 0..c {
            out[t * c + ch] *= inv;
        }
    }
    Tensor::new(vec![w, c], out)
}

fn avg_pool_backward(x: &Tensor, k: usize, grad: &Tensor) -> Tensor {
    let (w, c) = (x.shape()[0], x.shape()[1]);
    let left = pool_left(k);
    let inv = 1.0 / k as f64;
    let gd = grad.data();
    let mut gx = Tensor::zeros(x.shape());
    let gxd = gx.data_mut();
    for t in 0..w {
        for j in 0..k {
            let s = (t + j).saturating_sub(left).min(w - 1);
            for ch in 0..c {
                gxd[s * c + ch] += gd[t * c + ch] * inv;
            }
        }
    }
    gx
}

impl ScanOp {
    fn backward(&self, g: &Graph, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let u = g.value(self.u);
        let delta = g.value(self.delta);
        let a = g.value(self.a);
        let b = g.value(self.b);
        let c = g.value(self.c);
        let (w, d) = (u.shape()[0], u.shape()[1]);
        let n = a.shape()[1];
        let (ud, dd, ad, bd, cd, gy) = (u.data(), delta.data(), a.data(), b.data(), c.data(), grad.data());

        let mut gu = vec![0.0; w * d];
        let mut gdelta = vec![0.0; w * d];
        let mut ga = vec![0.0; d * n];
        let mut gb = vec![0.0; w * n];
        let mut gc = vec![0.0; w * n];
        // dL/dh_t, carried backwards through the recurrence.
        let mut gh = vec![0.0; d * n];
        for t in (0..w).rev() {
            let h_t = &self.states[t * d * n..(t + 1) * d * n];
            for di in 0..d {
                let gyt = gy[t * d + di];
                let dt = dd[t * d + di];
                let ut = ud[t * d + di];
                let mut g_delta = 0.0;
                let mut g_u = 0.0;
                for ni in 0..n {
                    let idx = di * n + ni;
                    let cn = cd[t * n + ni];
                    let bn = bd[t * n + ni];
                    gc[t * n + ni] += gyt * h_t[idx];
                    let ghi = gh[idx] + gyt * cn;
                    let an = ad[idx];
                    let abar = (dt * an).exp();
                    let h_prev = if t > 0 { self.states[(t - 1) * d * n + idx] } else { 0.0 };
                    let g_abar = ghi * h_prev;
                    g_delta += g_abar * abar * an + ghi * bn * ut;
                    ga[idx] += g_abar * abar * dt;
                    gb[t * n + ni] += ghi * dt * ut;
                    g_u += ghi * dt * bn;
                    gh[idx] = ghi * abar;
                }
                gdelta[t * d + di] += g_delta;
                gu[t * d + di] += g_u;
            }
        }
        Ok(vec![
            (self.u, Tensor::new(u.shape().to_vec(), gu)?),
            (self.delta, Tensor::new(delta.shape().to_vec(), gdelta)?),
            (self.a, Tensor::new(a.shape().to_vec(), ga)?),
            (self.b, Tensor::new(b.shape().to_vec(), gb)?),
            (self.c, Tensor::new(c.shape().to_vec(), gc)?),
        ])
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.emit(value, Op::Matmul(a, b), "matmul")
    }

    /// Applies `tag` elementwise. Binary tags need `b`, whose shape must equal
    /// `a`'s or be a trailing suffix of it (broadcast along leading axes).
    pub fn elementwise(&mut self, tag: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.value(a);
        let value = match (tag.is_binary(), b) {
            (true, Some(b)) => {
                let bv = self.value(b);
                if !broadcast_ok(av.shape(), bv.shape()) {
                    return Err(Error::Shape {
                        op: "elementwise",
                        lhs: av.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                let period = bv.len();
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = bv.data()[i % period];
                        match tag {
                            ElementwiseOp::Add => x + y,
                            ElementwiseOp::Sub => x - y,
                            _ => x * y,
                        }
                    })
                    .collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
            (false, None) => match tag {
                ElementwiseOp::Exp => av.map(f64::exp),
                ElementwiseOp::Neg => av.map(|x| -x),
                ElementwiseOp::Silu => av.map(silu),
                ElementwiseOp::Softplus => av.map(softplus),
                _ => unreachable!(),
            },
            (true, None) => return Err(invalid(format!("{tag:?} needs two operands"))),
            (false, Some(_)) => return Err(invalid(format!("{tag:?} takes one operand"))),
        };
        self.emit(value, Op::Elementwise(tag, a, b), &format!("{tag:?}").to_lowercase())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Exp, a, None)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Neg, a, None)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Silu, a, None)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Softplus, a, None)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.emit(value, Op::Scale(a, s), "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.emit(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.emit(value, Op::Mean(a), "mean")
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, mode: ConvMode) -> Result<Var> {
        let value = conv1d_forward(self.value(x), self.value(kernel), mode)?;
        self.emit(value, Op::Conv1d { x, kernel, mode }, "conv1d")
    }

    /// Width-`k` moving average with replicate padding, output length unchanged.
    pub fn avg_pool_same(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = avg_pool_forward(self.value(x), k)?;
        self.emit(value, Op::AvgPool { x, k }, "avg_pool_same")
    }

    /// Selective scan over time with per-step discretization:
    ///
    /// `h_t[d,n] = exp(delta[t,d] a[d,n]) h_{t-1}[d,n] + delta[t,d] b[t,n] u[t,d]`,
    /// `y[t,d] = sum_n c[t,n] h_t[d,n]`, with `h_0 = 0`.
    ///
    /// Shapes: `u, delta: W x D`, `a: D x N`, `b, c: W x N`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (uv, dv, av, bv, cv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let (w, d) = uv.expect_2d("selective_scan")?;
        let (da, n) = av.expect_2d("selective_scan")?;
        let shape_err = |rhs: &Tensor| Error::Shape {
            op: "selective_scan",
            lhs: uv.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if dv.shape() != uv.shape() {
            return Err(shape_err(dv));
        }
        if da != d {
            return Err(shape_err(av));
        }
        if bv.shape() != [w, n] {
            return Err(shape_err(bv));
        }
        if cv.shape() != [w, n] {
            return Err(shape_err(cv));
        }
        let (ud, dd, ad, bd, cd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut states = vec![0.0; w * d * n];
        let mut y = vec![0.0; w * d];
        let mut h = vec![0.0; d * n];
        for t in 0..w {
            for di in 0..d {
                let dt = dd[t * d + di];
                let ut = ud[t * d + di];
                let mut acc = 0.0;
                for ni in 0..n {
                    let idx = di * n + ni;
                    let hv = (dt * ad[idx]).exp() * h[idx] + dt * bd[t * n + ni] * ut;
                    h[idx] = hv;
                    acc += cd[t * n + ni] * hv;
                }
                y[t * d + di] = acc;
            }
            if !h.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("selective_scan hidden state at time step {t}")));
            }
            states[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
        }
        let value = Tensor::new(vec![w, d], y)?;
        self.emit(
            value,
            Op::Scan(ScanOp {
                u,
                delta,
                a,
                b,
                c,
                states,
            }),
            "selective_scan",
        )
    }
}
