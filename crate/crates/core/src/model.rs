//! End-to-end super-resolution network and its configuration.

use pmsr_tensor::{SplitMix64, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::{Group, GroupSpec, ScanVariant, StageOrder, StageTag};
use crate::error::{Error, Result};
use crate::freq::HfcaSource;
use crate::nn::Conv2d;
use crate::params::{Init, ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub groups: usize,
    pub blocks_per_group: usize,
    pub width: usize,
    pub scale: usize,
    pub window_attn: usize,
    pub wif: usize,
    pub wff: usize,
    pub n_state: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub stage_order: StageOrder,
    pub wsml_scan: ScanVariant,
    pub gsml_scan: ScanVariant,
    pub hfca_source: HfcaSource,
    pub use_hfm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            blocks_per_group: 4,
            width: 48,
            scale: 4,
            window_attn: 16,
            wif: 16,
            wff: 32,
            n_state: 8,
            heads: 4,
            ffn_ratio: 1,
            stage_order: StageOrder::LocalRegionalGlobal,
            wsml_scan: ScanVariant::Mwss,
            gsml_scan: ScanVariant::Mgss,
            hfca_source: HfcaSource::Eq9Xlf,
            use_hfm: true,
        }
    }
}

/// Named configurations: the default network, ablation variants, and
/// small models for tests and desk training.
pub const PRESETS: &[&str] = &[
    "default", "model1", "model2", "model3", "model4", "case1", "case2", "case3", "case4", "case5",
    "order-lrg", "order-glr", "order-rlg", "toy", "desk",
];

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let windows = |wif, wff| Self { wif, wff, ..Self::default() };
        Ok(match name {
            "default" | "order-lrg" => base,
            "model1" => Self { gsml_scan: ScanVariant::Ss2d, ..base },
            "model2" => Self { wsml_scan: ScanVariant::Ss2d, ..base },
            "model3" => Self {
                wsml_scan: ScanVariant::Ss2d,
                gsml_scan: ScanVariant::Ss2d,
                ..base
            },
            "model4" => Self { use_hfm: false, ..base },
            "case1" => windows(16, 16),
            "case2" => windows(32, 32),
            "case3" => windows(64, 64),
            "case4" => windows(16, 64),
            "case5" => windows(32, 64),
            "order-glr" => Self {
                stage_order: StageOrder::GlobalLocalRegional,
                ..base
            },
            "order-rlg" => Self {
                stage_order: StageOrder::RegionalLocalGlobal,
                ..base
            },
            "toy" => Self {
                groups: 2,
                blocks_per_group: 1,
                width: 24,
                ..base
            },
            "desk" => Self {
                groups: 1,
                blocks_per_group: 1,
                width: 16,
                heads: 2,
                n_state: 4,
                window_attn: 8,
                wif: 8,
                wff: 16,
                scale: 2,
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.width;
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=4).contains(&self.scale) {
            return fail(format!("scale {} not in {{2, 3, 4}}", self.scale));
        }
        if c == 0 || c % 4 != 0 || self.heads == 0 || c % self.heads != 0 {
            return fail(format!("width {c} must be divisible by 4 and by heads {}", self.heads));
        }
        if self.groups == 0 || self.n_state == 0 || self.ffn_ratio == 0 {
            return fail("groups, n_state and ffn_ratio must be positive".into());
        }
        if self.window_attn == 0 || self.wif == 0 || self.wif > self.wff {
            return fail(format!("windows must satisfy 0 < wif <= wff, got {} / {}", self.wif, self.wff));
        }
        Ok(())
    }

    /// Body extents are reflect-padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        let mut m = lcm(2, self.window_attn);
        if self.wsml_scan == ScanVariant::Mwss {
            m = lcm(m, lcm(self.wif, self.wff));
        }
        m
    }

    pub fn group_spec(&self) -> GroupSpec {
        GroupSpec {
            width: self.width,
            blocks: self.blocks_per_group,
            window_attn: self.window_attn,
            heads: self.heads,
            windows: (self.wif, self.wff),
            n_state: self.n_state,
            ffn_ratio: self.ffn_ratio,
            stage_order: self.stage_order,
            wsml_scan: self.wsml_scan,
            gsml_scan: self.gsml_scan,
            hfca_source: self.hfca_source,
            use_hfm: self.use_hfm,
        }
    }
}

/// Where in the first group a probe reads features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStage {
    /// through the first attention layer
    Tl,
    /// through the first window-scan layer
    Wsml,
    /// through the global-scan layer
    Gsml,
    /// the whole first group, refinement and residual included
    Group,
    /// the network output
    Output,
}

impl std::str::FromStr for ProbeStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tl" => ProbeStage::Tl,
            "wsml" => ProbeStage::Wsml,
            "gsml" => ProbeStage::Gsml,
            "group" => ProbeStage::Group,
            "output" => ProbeStage::Output,
            _ => return Err(Error::Config(format!("unknown stage {s:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TpmSr {
    cfg: ModelConfig,
    params: ParamStore,
    shallow: Conv2d,
    groups: Vec<Group>,
    head: Conv2d,
}

impl TpmSr {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let c = cfg.width;
        let shallow = Conv2d::new(&mut init, "shallow", 3, c, 3, 1, 1.0);
        let spec = cfg.group_spec();
        let groups = (0..cfg.groups)
            .map(|g| Group::new(&mut init, &format!("group{g}"), &spec, g * cfg.blocks_per_group))
            .collect::<Result<Vec<_>>>()?;
        let r = cfg.scale;
        let head = Conv2d::new(&mut init, "head", c, 3 * r * r, 3, 1, 1.0);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            shallow,
            groups,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("input {h}x{w} smaller than 8x8")));
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok((h, w))
    }

    fn pad(&self, f: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let m = self.cfg.pad_multiple();
        Ok(f.pad_reflect(h.div_ceil(m) * m - h, w.div_ceil(m) * m - w)?)
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_input(x)?;
        let fs = self.shallow.forward(s, x)?;
        let mut f = self.pad(&fs, h, w)?;
        for g in &self.groups {
            f = g.forward(s, &f)?;
        }
        let fr = f.crop(h, w)?.add(&fs)?;
        Ok(self.head.forward(s, &fr)?.pixel_shuffle(self.cfg.scale)?)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(&Session::inference(&self.params), x)
    }

    /// Padded body features: the input of every group, then the output of
    /// the last one.
    pub fn group_features(&self, s: &Session, x: &Tensor) -> Result<Vec<Tensor>> {
        let (h, w) = self.check_input(x)?;
        let mut feats = vec![self.pad(&self.shallow.forward(s, x)?, h, w)?];
        for g in &self.groups {
            let next = g.forward(s, feats.last().expect("non-empty"))?;
            feats.push(next);
        }
        Ok(feats)
    }

    /// Features of the first group at `stage`, cropped to the input extent.
    pub fn probe(&self, s: &Session, x: &Tensor, stage: ProbeStage) -> Result<Tensor> {
        if stage == ProbeStage::Output {
            return self.forward(s, x);
        }
        let (h, w) = self.check_input(x)?;
        let f = self.pad(&self.shallow.forward(s, x)?, h, w)?;
        let g = &self.groups[0];
        let upto = |tag: StageTag| -> Result<usize> {
            g.layers()
                .iter()
                .position(|l| l.tag() == tag)
                .map(|i| i + 1)
                .ok_or_else(|| Error::Config(format!("no {tag:?} layer in the first group")))
        };
        let out = match stage {
            ProbeStage::Tl => g.forward_layers(s, &f, upto(StageTag::Tl)?)?,
            ProbeStage::Wsml => g.forward_layers(s, &f, upto(StageTag::Wsml)?)?,
            ProbeStage::Gsml => g.forward_layers(s, &f, upto(StageTag::Gsml)?)?,
            _ => g.forward(s, &f)?,
        };
        Ok(out.crop(h, w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_differ() {
        let all: Vec<ModelConfig> = PRESETS.iter().map(|p| ModelConfig::preset(p).unwrap()).collect();
        for c in &all {
            c.validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_err());
        assert_eq!(ModelConfig::preset("case3").unwrap().pad_multiple(), 64);
        assert_eq!(ModelConfig::default().pad_multiple(), 32);
    }

    #[test]
    fn toml_round_trip_and_rejects_unknown() {
        let cfg = ModelConfig::preset("model3").unwrap();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ModelConfig::from_toml("widthh = 4").is_err());
        assert!(ModelConfig::from_toml("scale = 5").is_err());
        assert!(ModelConfig::from_toml("width = 50").is_err());
        let partial = ModelConfig::from_toml("groups = 2\nwsml_scan = \"2dss\"").unwrap();
        assert_eq!(partial.groups, 2);
        assert_eq!(partial.wsml_scan, ScanVariant::Ss2d);
    }

    #[test]
    fn shape_contract_and_padding() {
        let cfg = ModelConfig {
            scale: 3,
            ..ModelConfig::preset("desk").unwrap()
        };
        let m = TpmSr::new(&cfg, 1).unwrap();
        let x = Tensor::full(&[1, 3, 11, 9], 0.5);
        assert_eq!(m.infer(&x).unwrap().shape(), &[1, 3, 33, 27]);
        assert!(m.infer(&Tensor::zeros(&[1, 3, 4, 9])).is_err());
        assert!(m.infer(&Tensor::full(&[1, 3, 8, 8], f64::NAN)).is_err());
    }
}
