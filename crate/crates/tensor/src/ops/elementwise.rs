use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::shape::{broadcast_shape, broadcast_strides, for_each_broadcast, numel};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Sums a gradient laid out in `out` shape back onto an operand whose
/// broadcast strides are `s`.
fn reduce_broadcast(g: &[f64], out: &[usize], s: &[usize], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let zero = vec![0; out.len()];
    for_each_broadcast(out, s, &zero, |o, i, _| acc[i] += g[o]);
    acc
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let same = a.shape() == b.shape();
    let mut out = vec![0.0; numel(&out_shape)];
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    if same {
        for ((o, x), y) in out.iter_mut().zip(ad.iter()).zip(bd.iter()) {
            *o = op.apply(*x, *y);
        }
    } else {
        for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = op.apply(ad[i], bd[j]));
    }
    let (na, nb) = (a.numel(), b.numel());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let shape_c = out_shape.clone();
    Ok(Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], move |g| {
        // Elementwise partials in output layout, then reduced onto each operand.
        let mut ga = ra.then(|| vec![0.0; g.len()]);
        let mut gb = rb.then(|| vec![0.0; g.len()]);
        for_each_broadcast(&shape_c, &sa, &sb, |o, i, j| {
            let (x, y) = (ad[i], bd[j]);
            let (pa, pb) = match op {
                BinOp::Add => (1.0, 1.0),
                BinOp::Sub => (1.0, -1.0),
                BinOp::Mul => (y, x),
                BinOp::Div => (1.0 / y, -x / (y * y)),
            };
            if let Some(ga) = ga.as_mut() {
                ga[o] = g[o] * pa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[o] = g[o] * pb;
            }
        });
        let ga = ga.map(|v| if same { v } else { reduce_broadcast(&v, &shape_c, &sa, na) });
        let gb = gb.map(|v| if same { v } else { reduce_broadcast(&v, &shape_c, &sb, nb) });
        vec![ga, gb]
    }))
}

/// Elementwise map whose derivative is expressed from input `x` and output `y`.
fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let xd = x.data_arc();
    let out: Vec<f64> = xd.iter().map(|&v| f(v)).collect();
    let yd = Arc::new(out);
    Tensor::from_op_shared(yd.clone(), x.shape().to_vec(), vec![x.clone()], move |g| {
        vec![Some(
            g.iter()
                .zip(xd.iter().zip(yd.iter()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect(),
        )]
    })
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_K * (x + GELU_C * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            },
        )
    }
}
