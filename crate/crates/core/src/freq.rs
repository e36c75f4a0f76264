//! High-frequency refinement: pool-subtract high-pass, multi-scale gating,
//! channel alignment, and the two-branch refinement module built from them.

use pmsr_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Init, Session};

/// `f - up(pool(f))`.
pub fn hfm(f: &Tensor) -> Result<Tensor> {
    Ok(f.sub(&f.avg_pool2()?.bilinear_up2()?)?)
}

/// Low- and high-frequency parts of `f` as used by [`hfm`].
pub fn hfm_split(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let low = f.avg_pool2()?;
    let high = f.sub(&low.bilinear_up2()?)?;
    Ok((low, high))
}

/// Sum of squared deviations from the per-channel mean.
pub fn ac_energy(x: &Tensor) -> Result<f64> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut e = 0.0;
    for bc in 0..b * c {
        let p = &x.data()[bc * hw..(bc + 1) * hw];
        let mean = p.iter().sum::<f64>() / hw as f64;
        e += p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    Ok(e)
}

/// Multi-scale gate: parallel depthwise 3/5/7 summed, then a sigmoid gate
/// from a pointwise conv applied to the input.
#[derive(Debug, Clone)]
pub struct Msgm {
    dw: [Conv2d; 3],
    gate: Conv2d,
}

impl Msgm {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut p = init.sub(name);
        Self {
            dw: [
                Conv2d::depthwise(&mut p, "dw3", c, 3).with_replicate_padding(),
                Conv2d::depthwise(&mut p, "dw5", c, 5).with_replicate_padding(),
                Conv2d::depthwise(&mut p, "dw7", c, 7).with_replicate_padding(),
            ],
            gate: Conv2d::pointwise(&mut p, "gate", c, c, 1.0),
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let mut sum = self.dw[0].forward(s, x)?;
        for conv in &self.dw[1..] {
            sum = sum.add(&conv.forward(s, x)?)?;
        }
        Ok(x.mul(&self.gate.forward(s, &sum)?.sigmoid())?)
    }
}

/// Squeeze-excite channel map `[B, C, 1, 1]` in (0, 1).
#[derive(Debug, Clone)]
pub struct Hfca {
    fc1: Conv2d,
    fc2: Conv2d,
}

pub const HFCA_REDUCTION: usize = 4;

impl Hfca {
    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut p = init.sub(name);
        let hidden = (c / HFCA_REDUCTION).max(1);
        Self {
            fc1: Conv2d::pointwise(&mut p, "fc1", c, hidden, 1.0),
            fc2: Conv2d::pointwise(&mut p, "fc2", hidden, c, 1.0),
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let z = x.global_avg_pool()?;
        let z = self.fc1.forward(s, &z)?.relu();
        Ok(self.fc2.forward(s, &z)?.sigmoid())
    }
}

/// Which tensor the channel map is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfcaSource {
    /// the processed low-frequency feature
    #[default]
    Eq9Xlf,
    /// the degraded-branch high-frequency feature
    ProseDeg,
}

/// Intermediate tensors of one refinement pass, for probing.
#[derive(Debug, Clone)]
pub struct AhfrmTrace {
    /// high-pass of the gated reference, before its depthwise conv
    pub ref_high: Tensor,
    pub x_ref: Tensor,
    pub x_deg: Tensor,
    pub x_hf: Tensor,
    pub mask: Tensor,
    /// `x_hf ⊙ M + x_lf`, before the output projection
    pub x_sum: Tensor,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
pub struct Ahfrm {
    msgm: Msgm,
    ref_dw: Conv2d,
    deg_conv: Conv2d,
    fuse: Conv2d,
    hfca: Hfca,
    out: Conv2d,
    source: HfcaSource,
    use_hfm: bool,
}

impl Ahfrm {
    pub fn new(init: &mut Init, name: &str, c: usize, source: HfcaSource, use_hfm: bool) -> Self {
        let mut p = init.sub(name);
        Self {
            msgm: Msgm::new(&mut p, "msgm", c),
            ref_dw: Conv2d::depthwise(&mut p, "ref_dw", c, 3),
            deg_conv: Conv2d::pointwise(&mut p, "deg_conv", c, c, 1.0),
            fuse: Conv2d::pointwise(&mut p, "fuse", 2 * c, c, 1.0),
            hfca: Hfca::new(&mut p, "hfca", c),
            out: Conv2d::pointwise(&mut p, "out", c, c, 1.0),
            source,
            use_hfm,
        }
    }

    fn high_pass(&self, x: &Tensor) -> Result<Tensor> {
        if self.use_hfm {
            hfm(x)
        } else {
            Ok(x.clone())
        }
    }

    pub fn trace(&self, s: &Session, x_ori: &Tensor, x_lf: &Tensor) -> Result<AhfrmTrace> {
        if x_ori.shape() != x_lf.shape() {
            return Err(Error::Shape(format!(
                "refinement inputs differ: {:?} vs {:?}",
                x_ori.shape(),
                x_lf.shape()
            )));
        }
        let ref_high = self.high_pass(&self.msgm.forward(s, x_ori)?)?;
        let x_ref = self.ref_dw.forward(s, &ref_high)?;
        let x_deg = self.high_pass(&self.deg_conv.forward(s, x_lf)?)?;
        let x_hf = self.fuse.forward(s, &Tensor::concat(&[x_ref.clone(), x_deg.clone()], 1)?)?;
        let mask = match self.source {
            HfcaSource::Eq9Xlf => self.hfca.forward(s, x_lf)?,
            HfcaSource::ProseDeg => self.hfca.forward(s, &x_deg)?,
        };
        let x_sum = x_hf.mul(&mask)?.add(x_lf)?;
        let out = self.out.forward(s, &x_sum)?;
        Ok(AhfrmTrace {
            ref_high,
            x_ref,
            x_deg,
            x_hf,
            mask,
            x_sum,
            out,
        })
    }

    pub fn forward(&self, s: &Session, x_ori: &Tensor, x_lf: &Tensor) -> Result<Tensor> {
        Ok(self.trace(s, x_ori, x_lf)?.out)
    }
}
