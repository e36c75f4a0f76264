use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Source taps for one output coordinate of a ×2 bilinear upsample with
/// half-pixel centers: `out = v[i0] + frac * (v[i1] - v[i0])`.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Tensor {
    /// 2x2 mean pooling with stride 2; `H` and `W` must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avg_pool2", format!("extents {h}x{w} must be even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for bc in 0..b * c {
            let p = &x[bc * h * w..(bc + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let (r0, r1) = (2 * i * w, (2 * i + 1) * w);
                    // pairwise order keeps a constant window exact
                    let s = (p[r0 + 2 * j] + p[r0 + 2 * j + 1]) + (p[r1 + 2 * j] + p[r1 + 2 * j + 1]);
                    out[(bc * ho + i) * wo + j] = s * 0.25;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![b, c, ho, wo], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; b * c * h * w];
            for bc in 0..b * c {
                for i in 0..h {
                    for j in 0..w {
                        gx[(bc * h + i) * w + j] = 0.25 * g[(bc * ho + i / 2) * wo + j / 2];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// ×2 bilinear upsampling with half-pixel centers (align-corners off).
    pub fn bilinear_up2(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if h == 0 || w == 0 {
            return Err(invalid("bilinear_up2", "empty spatial extent"));
        }
        let (ty, tx) = (Arc::new(bilinear_taps(h)), Arc::new(bilinear_taps(w)));
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0; b * c * ho * wo];
        let mut rowbuf = vec![0.0; w];
        for bc in 0..b * c {
            let p = &x[bc * h * w..(bc + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (q, r) in rowbuf.iter_mut().enumerate() {
                    let (a, bb) = (p[y0 * w + q], p[y1 * w + q]);
                    *r = a + fy * (bb - a);
                }
                let dst = &mut out[(bc * ho + oy) * wo..(bc * ho + oy + 1) * wo];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    dst[ox] = rowbuf[x0] + fx * (rowbuf[x1] - rowbuf[x0]);
                }
            }
        }
        Ok(Tensor::from_op(out, vec![b, c, ho, wo], vec![self.clone()], move |g| {
            let mut gx = vec![0.0; b * c * h * w];
            let mut growb = vec![0.0; w];
            for bc in 0..b * c {
                let gp = &mut gx[bc * h * w..(bc + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    growb.iter_mut().for_each(|v| *v = 0.0);
                    let src = &g[(bc * ho + oy) * wo..(bc * ho + oy + 1) * wo];
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        growb[x0] += (1.0 - fx) * src[ox];
                        growb[x1] += fx * src[ox];
                    }
                    for q in 0..w {
                        gp[y0 * w + q] += (1.0 - fy) * growb[q];
                        gp[y1 * w + q] += fy * growb[q];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[B, C*r*r, H, W] -> [B, C, r*H, r*W]`; channel `c*r*r + i*r + j`
    /// lands at sub-pixel `(i, j)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor> {
        let (b, crr, h, w) = self.dims4()?;
        if r == 0 || crr % (r * r) != 0 {
            return Err(invalid(
                "pixel_shuffle",
                format!("channels {crr} not divisible by r^2 = {}", r * r),
            ));
        }
        let c = crr / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ch = ci * r * r + (oy % r) * r + ox % r;
                        index.push(((bi * crr + ch) * h + oy / r) * w + ox / r);
                    }
                }
            }
        }
        Ok(self.gather_unchecked(Arc::new(index), vec![b, c, ho, wo]))
    }
}
