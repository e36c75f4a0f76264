use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    /// Layer normalization over `axis` (biased variance), followed by the
    /// per-feature affine `gamma * x_hat + beta` with `gamma, beta: [n]`.
    ///
    /// For `[B, C, H, W]` activations `axis = 1` normalizes each pixel's
    /// channel vector; `axis = rank - 1` is the usual token layout.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(invalid("layer_norm", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        for p in [gamma, beta] {
            if p.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let x = self.data();
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mean = (0..n).map(|k| x[at(k)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|k| (x[at(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for k in 0..n {
                    let xh = (x[at(k)] - mean) * is;
                    xhat[at(k)] = xh;
                    out[at(k)] = gd[k] * xh + bd[k];
                }
            }
        }
        let (rx, rg, rb) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut gx = rx.then(|| vec![0.0; g.len()]);
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for k in 0..n {
                            let dxh = g[at(k)] * gd[k];
                            m1 += dxh;
                            m2 += dxh * xhat[at(k)];
                            gg[k] += g[at(k)] * xhat[at(k)];
                            gb[k] += g[at(k)];
                        }
                        if let Some(gx) = gx.as_mut() {
                            let (m1, m2) = (m1 / n as f64, m2 / n as f64);
                            let is = inv_std[o * inner + i];
                            for k in 0..n {
                                let dxh = g[at(k)] * gd[k];
                                gx[at(k)] = is * (dxh - m1 - xhat[at(k)] * m2);
                            }
                        }
                    }
                }
                vec![gx, rg.then_some(gg), rb.then_some(gb)]
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| invalid("softmax", "0-d input"))?;
        if n == 0 {
            return Ok(self.clone());
        }
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = std::sync::Arc::new(out);
        Ok(Tensor::from_op_shared(y.clone(), self.shape().to_vec(), vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for ((gx, gy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    gx[k] = y[k] * (gy[k] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }
}
