use std::sync::Arc;

use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

impl Tensor {
    /// `softmax(scale * q kᵀ + bias) v` over `[.., T, d]` inputs with equal
    /// leading axes. `bias` is `[.., T, T]` matching a suffix of the leading
    /// axes and repeats over the rest. Returns the output and the
    /// (detached) attention weights; only the weights are kept for backward.
    pub fn attention(&self, k: &Tensor, v: &Tensor, bias: Option<&Tensor>, scale: f64) -> Result<(Tensor, Tensor)> {
        let qs = self.shape();
        let r = qs.len();
        if r < 2 || k.shape() != qs || v.shape() != qs {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: qs.to_vec(),
                rhs: if k.shape() != qs { k.shape() } else { v.shape() }.to_vec(),
            });
        }
        let (t, d) = (qs[r - 2], qs[r - 1]);
        let nb = self.numel() / (t * d).max(1);
        let nbias = match bias {
            Some(b) => {
                let bs = b.shape();
                let lead = &bs[..bs.len().saturating_sub(2)];
                if bs.len() < 2 || bs[bs.len() - 2..] != [t, t] || bs.len() > r || !qs[..r - 2].ends_with(lead) {
                    return Err(invalid("attention", format!("bias {bs:?} does not fit queries {qs:?}")));
                }
                b.numel() / (t * t)
            }
            None => 1,
        };
        let (qd, kd, vd) = (self.data_arc(), k.data_arc(), v.data_arc());
        let bd = bias.map(|b| b.data_arc());
        let (tt, td) = (t * t, t * d);
        let mut p = vec![0.0; nb * tt];
        let mut out = vec![0.0; nb * td];
        for i in 0..nb {
            let pi = &mut p[i * tt..(i + 1) * tt];
            let q = Mat::row_major(&qd[i * td..], t, d);
            let kt = Mat::row_major(&kd[i * td..], t, d).t();
            gemm(q, kt, pi, 0.0);
            let bias_row = bd.as_ref().map(|b| &b[(i % nbias) * tt..(i % nbias + 1) * tt]);
            for (row, chunk) in pi.chunks_mut(t).enumerate() {
                for (j, s) in chunk.iter_mut().enumerate() {
                    *s *= scale;
                    if let Some(b) = bias_row {
                        *s += b[row * t + j];
                    }
                }
                let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in chunk.iter_mut() {
                    *s = (*s - m).exp();
                    sum += *s;
                }
                chunk.iter_mut().for_each(|s| *s /= sum);
            }
            gemm(Mat::row_major(pi, t, t), Mat::row_major(&vd[i * td..], t, d), &mut out[i * td..(i + 1) * td], 0.0);
        }
        let p = Arc::new(p);
        let mut pshape = qs[..r - 2].to_vec();
        pshape.extend([t, t]);
        let weights = Tensor::from_op_shared(p.clone(), pshape, vec![], |_| vec![]);
        let mut parents = vec![self.clone(), k.clone(), v.clone()];
        parents.extend(bias.cloned());
        let has_bias = bias.is_some();
        let (rq, rk, rv) = (self.requires_grad(), k.requires_grad(), v.requires_grad());
        let rb = bias.is_some_and(|b| b.requires_grad());
        let n_all = nb * td;
        let out = Tensor::from_op(out, qs.to_vec(), parents, move |g| {
            let mut gq = rq.then(|| vec![0.0; n_all]);
            let mut gk = rk.then(|| vec![0.0; n_all]);
            let mut gv = rv.then(|| vec![0.0; n_all]);
            let mut gb = rb.then(|| vec![0.0; nbias * tt]);
            let mut ds = vec![0.0; tt];
            for i in 0..nb {
                let pi = &p[i * tt..(i + 1) * tt];
                let gy = Mat::row_major(&g[i * td..], t, d);
                if let Some(gv) = gv.as_mut() {
                    gemm(Mat::row_major(pi, t, t).t(), gy, &mut gv[i * td..(i + 1) * td], 1.0);
                }
                // dP = dY vᵀ, then the softmax adjoint in place
                gemm(gy, Mat::row_major(&vd[i * td..], t, d).t(), &mut ds, 0.0);
                for (dr, pr) in ds.chunks_mut(t).zip(pi.chunks(t)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(a, b)| *a = b * (*a - dot));
                }
                if let Some(gb) = gb.as_mut() {
                    let o = (i % nbias) * tt;
                    gb[o..o + tt].iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
                }
                ds.iter_mut().for_each(|x| *x *= scale);
                let dsm = Mat::row_major(&ds, t, t);
                if let Some(gq) = gq.as_mut() {
                    gemm(dsm, Mat::row_major(&kd[i * td..], t, d), &mut gq[i * td..(i + 1) * td], 1.0);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(dsm.t(), Mat::row_major(&qd[i * td..], t, d), &mut gk[i * td..(i + 1) * td], 1.0);
                }
            }
            let mut grads = vec![gq, gk, gv];
            if has_bias {
                grads.push(gb);
            }
            grads
        });
        Ok((out, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn matches_unfused_composition() {
        let mut rng = SplitMix64::new(3);
        let mut r = |s: &[usize]| Tensor::rand_uniform(s, -1.0, 1.0, &mut rng);
        let (q, k, v, b) = (r(&[2, 3, 5, 4]), r(&[2, 3, 5, 4]), r(&[2, 3, 5, 4]), r(&[3, 5, 5]));
        let (out, w) = q.attention(&k, &v, Some(&b), 0.5).unwrap();
        let p = q.matmul(&k.transpose_last().unwrap()).unwrap().scale(0.5).add(&b).unwrap().softmax_last().unwrap();
        assert!(w.max_abs_diff(&p).unwrap() < 1e-14);
        assert!(out.max_abs_diff(&p.matmul(&v).unwrap()).unwrap() < 1e-14);
        assert!(!w.requires_grad());
    }

    #[test]
    fn rejects_misfit_bias() {
        let q = Tensor::zeros(&[2, 3, 5, 4]);
        assert!(q.attention(&q, &q, Some(&Tensor::zeros(&[2, 5, 5])), 1.0).is_err());
        assert!(q.attention(&q, &Tensor::zeros(&[2, 3, 5, 3]), None, 1.0).is_err());
    }
}
