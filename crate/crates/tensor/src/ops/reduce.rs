use crate::error::{invalid, Result};
use crate::tensor::Tensor;

impl Tensor {
    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n.max(1) as f64))
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        self.reshape(&[b, c, h * w])?.mean_axis(2, true)?.reshape(&[b, c, 1, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_axis_values_and_grad() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]).unwrap().with_grad();
        let s = x.sum_axis(1, false).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 12.0]);
        let w = Tensor::new(vec![1.0, -2.0], &[2]).unwrap();
        s.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn global_pool_shape() {
        let x = Tensor::ones(&[2, 3, 4, 5]);
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.shape(), &[2, 3, 1, 1]);
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
