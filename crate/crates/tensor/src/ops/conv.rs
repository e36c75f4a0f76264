use crate::error::{invalid, Result, TensorError};
use crate::gemm::{gemm, Mat};
use crate::tensor::Tensor;

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    /// Stride 1 with "same" padding for an odd kernel of size `k`.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(k)
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `cin_g` channels starting at `x` (layout `[cin_g, h, w]`) into
/// `[cin_g * kh * kw, ho * wo]`.
fn im2col(x: &[f64], cin_g: usize, g: &Geom, cols: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    for ci in 0..cin_g {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
fn col2im(cols: &[f64], cin_g: usize, g: &Geom, x: &mut [f64]) {
    let hw_o = g.ho * g.wo;
    for ci in 0..cin_g {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw_o..(row + 1) * hw_o];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, b: usize, g: &Geom) -> Vec<f64> {
    let (hw, hwo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut out = vec![0.0; b * g.cin * hwo];
    for bc in 0..b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * hw..(bc + 1) * hw];
        let k = &w[c * kk..(c + 1) * kk];
        let dst = &mut out[bc * hwo..(bc + 1) * hwo];
        let b0 = bias.map_or(0.0, |b| b[c]);
        dst.iter_mut().for_each(|v| *v = b0);
        for ky in 0..g.kh {
            for oy in 0..g.ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..g.kw {
                    let wv = k[ky * g.kw + kx];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    b: usize,
    g: &Geom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (hw, hwo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; w.len()]);
    for bc in 0..b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * hw..(bc + 1) * hw];
        let gyp = &gy[bc * hwo..(bc + 1) * hwo];
        for ky in 0..g.kh {
            for oy in 0..g.ho {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = iy as usize * g.w;
                let grow = &gyp[oy * g.wo..(oy + 1) * g.wo];
                for kx in 0..g.kw {
                    let widx = c * kk + ky * g.kw + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for (ox, &gv) in grow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += gv * plane[row + ix as usize];
                            if let Some(gx) = gx.as_mut() {
                                gx[bc * hw + row + ix as usize] += gv * wv;
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gx, gw)
}

impl Tensor {
    /// 2-D cross-correlation. `x: [B, Cin, H, W]`, `weight: [Cout, Cin/groups, kh, kw]`,
    /// optional `bias: [Cout]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let (b, cin, h, w) = self.dims4()?;
        let (cout, cin_g, kh, kw) = weight.dims4()?;
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(invalid(
                "conv2d",
                format!("groups {groups} must divide Cin {cin} and Cout {cout}"),
            ));
        }
        if cin_g != cin / groups {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if let Some(bt) = bias {
            if bt.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: bt.shape().to_vec(),
                });
            }
        }
        if spec.stride == 0 || h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with padding {}", spec.padding),
            ));
        }
        let g = Geom {
            cin,
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (w + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (xd, wd) = (self.data_arc(), weight.data_arc());
        let bd = bias.map(|b| b.data_arc());
        let depthwise = groups == cin && cout == cin;
        let cout_g = cout / groups;
        let kdim = cin_g * kh * kw;
        let hwo = g.ho * g.wo;

        let out = if depthwise {
            depthwise_forward(&xd, &wd, bd.as_deref().map(|v| v.as_slice()), b, &g)
        } else {
            let mut out = vec![0.0; b * cout * hwo];
            let mut cols = if g.is_pointwise() { vec![] } else { vec![0.0; kdim * hwo] };
            for bi in 0..b {
                for gi in 0..groups {
                    let xs = &xd[(bi * cin + gi * cin_g) * h * w..(bi * cin + (gi + 1) * cin_g) * h * w];
                    let dst = &mut out[(bi * cout + gi * cout_g) * hwo..(bi * cout + (gi + 1) * cout_g) * hwo];
                    if let Some(bd) = &bd {
                        for (co, row) in dst.chunks_mut(hwo).enumerate() {
                            row.iter_mut().for_each(|v| *v = bd[gi * cout_g + co]);
                        }
                    }
                    let colm = if g.is_pointwise() {
                        Mat::row_major(xs, kdim, hwo)
                    } else {
                        im2col(xs, cin_g, &g, &mut cols);
                        Mat::row_major(&cols, kdim, hwo)
                    };
                    let wm = Mat::row_major(&wd[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], cout_g, kdim);
                    gemm(wm, colm, dst, 1.0);
                }
            }
            out
        };

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let rb = bias.map(|b| b.requires_grad());
        Ok(Tensor::from_op(out, vec![b, cout, g.ho, g.wo], parents, move |gy| {
            let (gx, gw) = if depthwise {
                depthwise_backward(&xd, &wd, gy, b, &g, rx, rw)
            } else {
                let mut gx = rx.then(|| vec![0.0; xd.len()]);
                let mut gw = rw.then(|| vec![0.0; wd.len()]);
                let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kdim * hwo }];
                let mut gcols = vec![0.0; if rx && !g.is_pointwise() { kdim * hwo } else { 0 }];
                for bi in 0..b {
                    for gi in 0..groups {
                        let xoff = (bi * cin + gi * cin_g) * h * w;
                        let xs = &xd[xoff..xoff + cin_g * h * w];
                        let yoff = (bi * cout + gi * cout_g) * hwo;
                        let gym = Mat::row_major(&gy[yoff..yoff + cout_g * hwo], cout_g, hwo);
                        let wm = Mat::row_major(&wd[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], cout_g, kdim);
                        if let Some(gw) = gw.as_mut() {
                            let colm = if g.is_pointwise() {
                                Mat::row_major(xs, kdim, hwo)
                            } else {
                                im2col(xs, cin_g, &g, &mut cols);
                                Mat::row_major(&cols, kdim, hwo)
                            };
                            gemm(gym, colm.t(), &mut gw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim], 1.0);
                        }
                        if let Some(gx) = gx.as_mut() {
                            if g.is_pointwise() {
                                gemm(wm.t(), gym, &mut gx[xoff..xoff + cin_g * h * w], 1.0);
                            } else {
                                gemm(wm.t(), gym, &mut gcols, 0.0);
                                col2im(&gcols, cin_g, &g, &mut gx[xoff..xoff + cin_g * h * w]);
                            }
                        }
                    }
                }
                (gx, gw)
            };
            let mut grads = vec![gx, gw];
            if let Some(rb) = rb {
                grads.push(rb.then(|| {
                    let mut gb = vec![0.0; cout];
                    for (i, row) in gy.chunks(hwo).enumerate() {
                        gb[i % cout] += row.iter().sum::<f64>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_scaling_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let y = x.conv2d(&Tensor::full(&[1, 1, 1, 1], 2.0), None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.data(), x.scale(2.0).data());
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 });
        let y = x.conv2d(&Tensor::ones(&[1, 1, 3, 3]), None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data(), &[1.0; 9]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        let y = x.conv2d(&w, None, Conv2dSpec::depthwise(3, 3)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cross_correlation_not_convolution() {
        // kernel [[0,0,0],[0,0,1],[0,0,0]] picks the right-hand neighbour
        let x = Tensor::from_fn(&[1, 1, 1, 4], |i| i as f64);
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 5 { 1.0 } else { 0.0 });
        let y = x.conv2d(&w, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn grouped_equals_depthwise_path() {
        // groups == Cin with Cout == 2*Cin takes the im2col path; compare
        // channel pairs to the depthwise fast path.
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.11).cos());
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 * 0.7).sin());
        let fast = x.conv2d(&w, None, Conv2dSpec::depthwise(3, 2)).unwrap();
        let w2 = Tensor::from_fn(&[4, 1, 3, 3], |i| w.data()[(i / 18) * 9 + i % 9]);
        let slow = x.conv2d(&w2, None, Conv2dSpec { groups: 2, ..Conv2dSpec::same(3) }).unwrap();
        for c in 0..2 {
            let a = &fast.data()[c * 16..(c + 1) * 16];
            let b = &slow.data()[c * 32..c * 32 + 16];
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stride_output_extent() {
        let x = Tensor::zeros(&[1, 1, 7, 6]);
        let y = x
            .conv2d(&Tensor::ones(&[1, 1, 3, 3]), None, Conv2dSpec { stride: 2, padding: 1, groups: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 3]);
    }

    #[test]
    fn bad_groups_and_extent() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(x.conv2d(&w, None, Conv2dSpec { groups: 2, ..Conv2dSpec::same(3) }).is_err());
        let big = Tensor::zeros(&[1, 3, 7, 7]);
        assert!(x.conv2d(&big, None, Conv2dSpec::default()).is_err());
    }
}
