use std::sync::Arc;

use crate::error::{invalid, Result, TensorError};
use crate::shape::{numel, strides};
use crate::tensor::Tensor;

impl Tensor {
    /// Reinterprets the buffer with a new shape of equal size (no copy).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op_shared(self.data_arc(), shape.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of {r} axes")));
        }
        let in_shape = self.shape().to_vec();
        let in_strides = strides(&in_shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let index = Arc::new(permuted_index(&out_shape, &src_strides));
        Ok(self.gather_unchecked(index, out_shape))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather_unchecked(Arc::new(index), out_shape))
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn split(&self, axis: usize, parts: usize) -> Result<Vec<Tensor>> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid("split", format!("axis {axis} out of range")))?;
        if parts == 0 || n % parts != 0 {
            return Err(invalid("split", format!("extent {n} is not divisible into {parts} parts")));
        }
        let step = n / parts;
        (0..parts).map(|i| self.narrow(axis, i * step, step)).collect()
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(out, shape, parts.to_vec(), move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().zip(&flags).map(|(gp, &f)| f.then_some(gp)).collect()
        }))
    }

    /// `out.flat[i] = self.flat[index[i]]`. The backward pass scatter-adds,
    /// so repeated indices are allowed.
    pub fn gather(&self, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Tensor> {
        if index.len() != numel(out_shape) {
            return Err(invalid(
                "gather",
                format!("{} indices for output shape {out_shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= self.numel()) {
            return Err(invalid("gather", format!("index {bad} out of range {}", self.numel())));
        }
        Ok(self.gather_unchecked(index, out_shape.to_vec()))
    }

    pub(crate) fn gather_unchecked(&self, index: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = index.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Tensor::from_op(out, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; n];
            for (&i, &gv) in index.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    /// Mirror-pads the bottom and right of `[B, C, H, W]` (edge pixel not
    /// repeated). Pads larger than the extent keep mirroring periodically.
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if (bottom > 0 && h < 2) || (right > 0 && w < 2) {
            return Err(invalid("pad_reflect", format!("cannot mirror an extent of {h}x{w}")));
        }
        if bottom == 0 && right == 0 {
            return Ok(self.clone());
        }
        let (hp, wp) = (h + bottom, w + right);
        let rows: Vec<usize> = (0..hp).map(|i| mirror(i, h)).collect();
        let cols: Vec<usize> = (0..wp).map(|j| mirror(j, w)).collect();
        let mut index = Vec::with_capacity(b * c * hp * wp);
        for bc in 0..b * c {
            for &r in &rows {
                index.extend(cols.iter().map(|&q| (bc * h + r) * w + q));
            }
        }
        Ok(self.gather_unchecked(Arc::new(index), vec![b, c, hp, wp]))
    }

    /// Top-left `h x w` crop of `[B, C, H, W]`.
    pub fn crop(&self, h: usize, w: usize) -> Result<Tensor> {
        let (_, _, hh, ww) = self.dims4()?;
        if h == hh && w == ww {
            return Ok(self.clone());
        }
        self.narrow(2, 0, h)?.narrow(3, 0, w)
    }
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let t = i % period;
    if t < n {
        t
    } else {
        period - t
    }
}

/// Source offsets for every output position, given per-output-axis source strides.
fn permuted_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total = numel(out_shape);
    let mut index = Vec::with_capacity(total);
    let nd = out_shape.len();
    if nd == 0 {
        return vec![0];
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        index.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    index
}
