use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::shape::{broadcast_shape, broadcast_strides, numel};
use crate::tensor::Tensor;

fn batch_offsets(batch_shape: &[usize], own: &[usize], mat_size: usize) -> Vec<usize> {
    let strides = broadcast_strides(own, batch_shape);
    let total = numel(batch_shape);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; batch_shape.len()];
    for _ in 0..total {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        offs.push(off * mat_size);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offs
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let offs_a = batch_offsets(&batch, ba, m * k);
        let offs_b = batch_offsets(&batch, bb, k * n);
        let nb = offs_a.len();
        let (ad, bd) = (self.data_arc(), other.data_arc());
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(
                Mat::row_major(&ad[offs_a[i]..], m, k),
                Mat::row_major(&bd[offs_b[i]..], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let (la, lb) = (ad.len(), bd.len());
        Ok(Tensor::from_op(out, shape, vec![self.clone(), other.clone()], move |g| {
            let mut ga = ra.then(|| vec![0.0; la]);
            let mut gb = rb.then(|| vec![0.0; lb]);
            for i in 0..nb {
                let gy = Mat::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                if let Some(ga) = ga.as_mut() {
                    // dA = dY · Bᵀ
                    let bt = Mat::row_major(&bd[offs_b[i]..], k, n).t();
                    gemm(gy, bt, &mut ga[offs_a[i]..offs_a[i] + m * k], 1.0);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dY
                    let at = Mat::row_major(&ad[offs_a[i]..], m, k).t();
                    gemm(at, gy, &mut gb[offs_b[i]..offs_b[i] + k * n], 1.0);
                }
            }
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x[.., in] · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let xs = self.shape();
        let (out_f, in_f) = match *weight.shape() {
            [o, i] => (o, i),
            _ => return Err(invalid("linear", format!("weight must be 2-d, got {:?}", weight.shape()))),
        };
        if xs.last() != Some(&in_f) {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![out_f],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / in_f.max(1);
        let (xd, wd) = (self.data_arc(), weight.data_arc());
        let mut out = vec![0.0; rows * out_f];
        if let Some(b) = bias {
            for r in out.chunks_mut(out_f) {
                r.copy_from_slice(b.data());
            }
        }
        gemm(
            Mat::row_major(&xd, rows, in_f),
            Mat::row_major(&wd, out_f, in_f).t(),
            &mut out,
            1.0,
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().expect("non-empty") = out_f;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.map(|b| b.requires_grad());
        Ok(Tensor::from_op(out, shape, parents, move |g| {
            let gy = Mat::row_major(g, rows, out_f);
            let gx = rx.then(|| {
                let mut gx = vec![0.0; rows * in_f];
                gemm(gy, Mat::row_major(&wd, out_f, in_f), &mut gx, 0.0);
                gx
            });
            let gw = rw.then(|| {
                let mut gw = vec![0.0; out_f * in_f];
                gemm(gy.t(), Mat::row_major(&xd, rows, in_f), &mut gw, 0.0);
                gw
            });
            let mut grads = vec![gx, gw];
            if let Some(rb) = rb {
                grads.push(rb.then(|| {
                    let mut gb = vec![0.0; out_f];
                    for r in g.chunks(out_f) {
                        gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("transpose_last", "need at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }
}
