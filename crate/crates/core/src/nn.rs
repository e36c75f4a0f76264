//! Small parameterised layers shared by the blocks.

use std::sync::Arc;

use pmsr_tensor::{Conv2dSpec, Tensor};

use crate::error::Result;
use crate::params::{Init, ParamId, Session};

/// Init gain for projections that feed a residual sum.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Pads every border by `p` pixels, repeating the edge values.
pub fn pad_replicate(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let clamp = |v: usize, n: usize| v.saturating_sub(p).min(n - 1);
    let mut index = Vec::with_capacity(b * c * ho * wo);
    for bc in 0..b * c {
        for y in 0..ho {
            let row = (bc * h + clamp(y, h)) * w;
            index.extend((0..wo).map(|q| row + clamp(q, w)));
        }
    }
    Ok(x.gather(Arc::new(index), &[b, c, ho, wo])?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: Conv2dSpec,
    replicate: bool,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, groups: usize, gain: f64) -> Self {
        let mut p = init.sub(name);
        let fan_in = cin / groups * k * k;
        let weight = p.he("weight", &[cout, cin / groups, k, k], fan_in, gain);
        let bias = Some(p.constant("bias", &[cout], 0.0));
        Self {
            weight,
            bias,
            spec: Conv2dSpec {
                stride: 1,
                padding: k / 2,
                groups,
            },
            replicate: false,
        }
    }

    /// Same-size output with edge-replicated borders instead of zeros, so a
    /// constant input maps to a constant output.
    pub fn with_replicate_padding(mut self) -> Self {
        self.replicate = true;
        self
    }

    /// Pointwise projection, i.e. a per-pixel linear map over channels.
    pub fn pointwise(init: &mut Init, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        Self::new(init, name, cin, cout, 1, 1, gain)
    }

    pub fn depthwise(init: &mut Init, name: &str, c: usize, k: usize) -> Self {
        Self::new(init, name, c, c, k, c, 1.0)
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.map(|id| s.p(id));
        if self.replicate && self.spec.padding > 0 {
            let xp = pad_replicate(x, self.spec.padding)?;
            let spec = Conv2dSpec { padding: 0, ..self.spec };
            return Ok(xp.conv2d(&s.p(self.weight), b.as_ref(), spec)?);
        }
        Ok(x.conv2d(&s.p(self.weight), b.as_ref(), self.spec)?)
    }
}

/// Dense map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, din: usize, dout: usize, bias: bool, gain: f64) -> Self {
        let mut p = init.sub(name);
        let weight = p.he("weight", &[dout, din], din, gain);
        let bias = bias.then(|| p.constant("bias", &[dout], 0.0));
        Self { weight, bias }
    }

    pub(crate) fn from_ids(weight: ParamId, bias: Option<ParamId>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.map(|id| s.p(id));
        Ok(x.linear(&s.p(self.weight), b.as_ref())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, c: usize) -> Self {
        let mut p = init.sub(name);
        Self {
            gamma: p.constant("weight", &[c], 1.0),
            beta: p.constant("bias", &[c], 0.0),
        }
    }

    /// Normalises over `axis`; axis 1 for BCHW feature maps.
    pub fn forward(&self, s: &Session, x: &Tensor, axis: usize) -> Result<Tensor> {
        Ok(x.layer_norm(&s.p(self.gamma), &s.p(self.beta), axis, Self::EPS)?)
    }
}

/// Pointwise feed-forward: expand, GELU, project back.
#[derive(Debug, Clone)]
pub struct Ffn {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, c: usize, ratio: usize) -> Self {
        let mut p = init.sub(name);
        let hidden = c * ratio;
        Self {
            fc1: Conv2d::pointwise(&mut p, "fc1", c, hidden, 1.0),
            fc2: Conv2d::pointwise(&mut p, "fc2", hidden, c, RESIDUAL_GAIN),
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(s, x)?.gelu();
        self.fc2.forward(s, &h)
    }
}
