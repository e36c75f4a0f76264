//! Gated scan modules, the three residual layer kinds, and group assembly.

use pmsr_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{WindowAttention, WindowAttentionConfig};
use crate::error::{Error, Result};
use crate::freq::{Ahfrm, HfcaSource};
use crate::layouts::{cardinal_layout, direction_schedule, gather, scatter, window_layout, ScanLayout};
use crate::nn::{Conv2d, Ffn, LayerNorm, RESIDUAL_GAIN};
use crate::params::{Init, Session};
use crate::ssm::SsmParams;

/// How a gated scan module orders and splits its channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanVariant {
    /// two channel halves over window layouts of two sizes
    Mwss,
    /// four channel quarters, one per cardinal direction
    Mgss,
    /// full channels replicated over all four cardinal directions, summed
    #[serde(rename = "2dss")]
    Ss2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageTag {
    Tl,
    Wsml,
    Gsml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    /// TL, WSML per block, then GSML
    #[default]
    LocalRegionalGlobal,
    /// GSML first, then TL, WSML per block
    GlobalLocalRegional,
    /// WSML, TL per block, then GSML
    RegionalLocalGlobal,
}

impl StageOrder {
    pub fn tags(self, blocks: usize) -> Vec<StageTag> {
        use StageTag::*;
        let pair = match self {
            StageOrder::RegionalLocalGlobal => [Wsml, Tl],
            _ => [Tl, Wsml],
        };
        let body = (0..blocks).flat_map(|_| pair);
        match self {
            StageOrder::GlobalLocalRegional => std::iter::once(Gsml).chain(body).collect(),
            _ => body.chain(std::iter::once(Gsml)).collect(),
        }
    }
}

fn scan_along(s: &Session, x: &Tensor, ssm: &SsmParams, layout: &ScanLayout) -> Result<Tensor> {
    let y = ssm.forward(s, &gather(x, layout)?)?;
    scatter(&y, layout, layout.h, layout.w)
}

/// Channel halves scanned with window layouts `wif` and `wff` sharing the
/// scheduled axis in opposite directions.
pub fn mwss(s: &Session, xm: &Tensor, ssm_i: &SsmParams, ssm_f: &SsmParams, windows: (usize, usize), block_index: usize) -> Result<Tensor> {
    let (_, c, h, w) = xm.dims4()?;
    if c % 2 != 0 {
        return Err(Error::Shape(format!("window scan needs even channels, got {c}")));
    }
    let (axis, dir_i, dir_f) = direction_schedule(block_index);
    let halves = xm.split(1, 2)?;
    let li = window_layout(h, w, windows.0, axis, dir_i)?;
    let lf = window_layout(h, w, windows.1, axis, dir_f)?;
    let yi = scan_along(s, &halves[0], ssm_i, &li)?;
    let yf = scan_along(s, &halves[1], ssm_f, &lf)?;
    Ok(Tensor::concat(&[yi, yf], 1)?)
}

/// Channel quarters, quarter `q` scanned along cardinal layout `q`.
pub fn mgss(s: &Session, xm: &Tensor, ssms: &[SsmParams]) -> Result<Tensor> {
    let (_, c, h, w) = xm.dims4()?;
    if c % 4 != 0 || ssms.len() != 4 {
        return Err(Error::Shape(format!("global scan needs channels divisible by 4, got {c}")));
    }
    let parts = xm.split(1, 4)?;
    let ys = parts
        .iter()
        .zip(ssms)
        .enumerate()
        .map(|(q, (x, ssm))| scan_along(s, x, ssm, &*cardinal_layout(h, w, q)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::concat(&ys, 1)?)
}

/// Full-width scans along all four cardinal layouts, summed.
pub fn ss2d(s: &Session, xm: &Tensor, ssms: &[SsmParams]) -> Result<Tensor> {
    let (_, _, h, w) = xm.dims4()?;
    let mut acc: Option<Tensor> = None;
    for (q, ssm) in ssms.iter().enumerate() {
        let y = scan_along(s, xm, ssm, &*cardinal_layout(h, w, q)?)?;
        acc = Some(match acc {
            Some(a) => a.add(&y)?,
            None => y,
        });
    }
    acc.ok_or_else(|| Error::Config("2-D scan without directions".into()))
}

/// Gated scan module: projection, depthwise sigmoid gate, scan, norm,
/// output projection.
#[derive(Debug, Clone)]
pub struct ScanModule {
    variant: ScanVariant,
    windows: (usize, usize),
    in_proj: Conv2d,
    gate: Conv2d,
    ssms: Vec<SsmParams>,
    out_norm: LayerNorm,
    out_proj: Conv2d,
}

impl ScanModule {
    pub fn new(init: &mut Init, name: &str, variant: ScanVariant, c: usize, n_state: usize, windows: (usize, usize)) -> Result<Self> {
        let (branches, width) = match variant {
            ScanVariant::Mwss if c % 2 == 0 => (2, c / 2),
            ScanVariant::Mgss if c % 4 == 0 => (4, c / 4),
            ScanVariant::Ss2d => (4, c),
            _ => return Err(Error::Config(format!("{variant:?} cannot split {c} channels"))),
        };
        let mut p = init.sub(name);
        let in_proj = Conv2d::pointwise(&mut p, "in_proj", c, c, 1.0);
        let gate = Conv2d::depthwise(&mut p, "gate", c, 3);
        let ssms = (0..branches).map(|i| SsmParams::new(&mut p, &format!("ssm{i}"), width, n_state)).collect();
        Ok(Self {
            variant,
            windows,
            in_proj,
            gate,
            ssms,
            out_norm: LayerNorm::new(&mut p, "out_norm", c),
            out_proj: Conv2d::pointwise(&mut p, "out_proj", c, c, RESIDUAL_GAIN),
        })
    }

    pub fn variant(&self) -> ScanVariant {
        self.variant
    }

    pub fn ssms(&self) -> &[SsmParams] {
        &self.ssms
    }

    /// The scan alone on an already gated input.
    pub fn scan(&self, s: &Session, xm: &Tensor, block_index: usize) -> Result<Tensor> {
        match self.variant {
            ScanVariant::Mwss => mwss(s, xm, &self.ssms[0], &self.ssms[1], self.windows, block_index),
            ScanVariant::Mgss => mgss(s, xm, &self.ssms),
            ScanVariant::Ss2d => ss2d(s, xm, &self.ssms),
        }
    }

    pub fn forward(&self, s: &Session, x: &Tensor, block_index: usize) -> Result<Tensor> {
        let xp = self.in_proj.forward(s, x)?;
        let xm = xp.mul(&self.gate.forward(s, &xp)?.sigmoid())?;
        let y = self.scan(s, &xm, block_index)?;
        self.out_proj.forward(s, &self.out_norm.forward(s, &y, 1)?)
    }
}

#[derive(Debug, Clone)]
pub enum Mixer {
    Attention(WindowAttention),
    Scan(ScanModule),
}

/// Pre-norm residual layer: `x + mixer(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Debug, Clone)]
pub struct Layer {
    tag: StageTag,
    norm1: LayerNorm,
    mixer: Mixer,
    norm2: LayerNorm,
    ffn: Ffn,
    scan_index: usize,
}

impl Layer {
    pub fn tag(&self) -> StageTag {
        self.tag
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let n = self.norm1.forward(s, x, 1)?;
        let m = match &self.mixer {
            Mixer::Attention(a) => a.forward(s, &n)?,
            Mixer::Scan(m) => m.forward(s, &n, self.scan_index)?,
        };
        let x = x.add(&m)?;
        let f = self.ffn.forward(s, &self.norm2.forward(s, &x, 1)?)?;
        Ok(x.add(&f)?)
    }
}

/// Everything a group needs to know about the architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupSpec {
    pub width: usize,
    pub blocks: usize,
    pub window_attn: usize,
    pub heads: usize,
    pub windows: (usize, usize),
    pub n_state: usize,
    pub ffn_ratio: usize,
    pub stage_order: StageOrder,
    pub wsml_scan: ScanVariant,
    pub gsml_scan: ScanVariant,
    pub hfca_source: HfcaSource,
    pub use_hfm: bool,
}

/// Blocks of (TL, WSML), one GSML, refinement, conv, and a group residual.
#[derive(Debug, Clone)]
pub struct Group {
    layers: Vec<Layer>,
    ahfrm: Ahfrm,
    conv: Conv2d,
}

impl Group {
    /// `first_block` is the global index of this group's first window-scan
    /// layer, which drives the direction schedule.
    pub fn new(init: &mut Init, name: &str, spec: &GroupSpec, first_block: usize) -> Result<Self> {
        let mut p = init.sub(name);
        let c = spec.width;
        let mut layers = Vec::new();
        let mut scan_index = first_block;
        for (i, tag) in spec.stage_order.tags(spec.blocks).into_iter().enumerate() {
            let mut lp = p.sub(&format!("layer{i}"));
            let norm1 = LayerNorm::new(&mut lp, "norm1", c);
            let (mixer, idx) = match tag {
                StageTag::Tl => {
                    let cfg = WindowAttentionConfig {
                        window: spec.window_attn,
                        heads: spec.heads,
                        dim: c,
                    };
                    (Mixer::Attention(WindowAttention::new(&mut lp, "attn", cfg)?), 0)
                }
                StageTag::Wsml => {
                    let m = ScanModule::new(&mut lp, "wissm", spec.wsml_scan, c, spec.n_state, spec.windows)?;
                    scan_index += 1;
                    (Mixer::Scan(m), scan_index - 1)
                }
                StageTag::Gsml => (
                    Mixer::Scan(ScanModule::new(&mut lp, "mgssm", spec.gsml_scan, c, spec.n_state, spec.windows)?),
                    0,
                ),
            };
            let norm2 = LayerNorm::new(&mut lp, "norm2", c);
            let ffn = Ffn::new(&mut lp, "ffn", c, spec.ffn_ratio);
            layers.push(Layer {
                tag,
                norm1,
                mixer,
                norm2,
                ffn,
                scan_index: idx,
            });
        }
        Ok(Self {
            layers,
            ahfrm: Ahfrm::new(&mut p, "ahfrm", c, spec.hfca_source, spec.use_hfm),
            conv: Conv2d::new(&mut p, "conv", c, c, 3, 1, RESIDUAL_GAIN),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn ahfrm(&self) -> &Ahfrm {
        &self.ahfrm
    }

    /// Output of the first `n` layers.
    pub fn forward_layers(&self, s: &Session, x: &Tensor, n: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers[..n.min(self.layers.len())] {
            h = layer.forward(s, &h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let x_lf = self.forward_layers(s, x, self.layers.len())?;
        let r = self.ahfrm.forward(s, x, &x_lf)?;
        Ok(self.conv.forward(s, &r)?.add(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use pmsr_tensor::SplitMix64;

    fn spec(c: usize) -> GroupSpec {
        GroupSpec {
            width: c,
            blocks: 1,
            window_attn: 8,
            heads: 2,
            windows: (8, 16),
            n_state: 4,
            ffn_ratio: 1,
            stage_order: StageOrder::default(),
            wsml_scan: ScanVariant::Mwss,
            gsml_scan: ScanVariant::Mgss,
            hfca_source: HfcaSource::Eq9Xlf,
            use_hfm: true,
        }
    }

    #[test]
    fn stage_orders() {
        use StageTag::*;
        assert_eq!(StageOrder::LocalRegionalGlobal.tags(2), vec![Tl, Wsml, Tl, Wsml, Gsml]);
        assert_eq!(StageOrder::GlobalLocalRegional.tags(1), vec![Gsml, Tl, Wsml]);
        assert_eq!(StageOrder::RegionalLocalGlobal.tags(1), vec![Wsml, Tl, Gsml]);
    }

    #[test]
    fn module_counts_at_width_48() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let mut init = Init::new(&mut store, &mut rng);
        ScanModule::new(&mut init, "w", ScanVariant::Mwss, 48, 8, (16, 32)).unwrap();
        ScanModule::new(&mut init, "g", ScanVariant::Mgss, 48, 8, (16, 32)).unwrap();
        assert!(ScanModule::new(&mut init, "bad", ScanVariant::Mgss, 6, 8, (16, 32)).is_err());
        let by = store.breakdown(1);
        assert_eq!(by, vec![("w".into(), 6_720), ("g".into(), 6_624)]);
    }

    #[test]
    fn group_shapes_and_variants_run() {
        let mut rng = SplitMix64::new(2);
        let x = Tensor::rand_uniform(&[1, 8, 16, 16], -1.0, 1.0, &mut rng);
        for (wsml, gsml) in [(ScanVariant::Mwss, ScanVariant::Mgss), (ScanVariant::Ss2d, ScanVariant::Ss2d)] {
            let mut store = ParamStore::new();
            let g = Group::new(&mut Init::new(&mut store, &mut rng), "g", &GroupSpec { wsml_scan: wsml, gsml_scan: gsml, ..spec(8) }, 0).unwrap();
            let y = g.forward(&Session::inference(&store), &x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zeroed_residual_branches_give_identity() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        let g = Group::new(&mut Init::new(&mut store, &mut rng), "g", &spec(8), 0).unwrap();
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| {
                let n = store.name(id);
                ["attn.proj", "out_proj", "ffn.fc2", "g.conv"].iter().any(|k| n.contains(k))
            })
            .collect();
        for id in ids {
            store.values_mut(id).fill(0.0);
        }
        let x = Tensor::rand_uniform(&[1, 8, 16, 16], -1.0, 1.0, &mut rng);
        let y = g.forward(&Session::inference(&store), &x).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
