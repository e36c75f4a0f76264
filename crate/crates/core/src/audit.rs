//! Parameter and multiply-accumulate accounting.
//!
//! Operation counts are multiply-accumulates of convolutions, dense maps,
//! attention products and the scan recurrence. Normalisation, activations
//! and elementwise arithmetic are not counted.

use crate::blocks::{ScanVariant, StageTag};
use crate::error::Result;
use crate::freq::HFCA_REDUCTION;
use crate::model::{ModelConfig, TpmSr};
use crate::ssm::SsmParams;

/// Exact number of learned scalars.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(TpmSr::new(cfg, 0)?.params().total())
}

/// Parameter totals grouped by top-level module name.
pub fn param_breakdown(cfg: &ModelConfig) -> Result<Vec<(String, usize)>> {
    Ok(TpmSr::new(cfg, 0)?.params().breakdown(1))
}

fn conv(cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    (cout * (cin / groups) * k * k) as u64
}

/// Per-token cost of one scan branch of width `d`: the selection
/// projections plus three products per state entry.
fn ssm_per_token(d: usize, n: usize) -> u64 {
    let r = SsmParams::dt_rank(d);
    (d * (r + 2 * n) + r * d + 3 * d * n) as u64
}

fn scan_module_per_pixel(variant: ScanVariant, c: usize, n: usize) -> u64 {
    let branches = match variant {
        ScanVariant::Mwss => 2 * ssm_per_token(c / 2, n),
        ScanVariant::Mgss => 4 * ssm_per_token(c / 4, n),
        ScanVariant::Ss2d => 4 * ssm_per_token(c, n),
    };
    2 * conv(c, c, 1, 1) + conv(c, c, 3, c) + branches
}

/// Per-pixel cost of each named stage of one group, on padded extents.
pub fn group_per_pixel(cfg: &ModelConfig) -> Vec<(&'static str, u64)> {
    let c = cfg.width;
    let ffn = 2 * (c * c * cfg.ffn_ratio) as u64;
    let t = (cfg.window_attn * cfg.window_attn) as u64;
    let tl = conv(c, 3 * c, 1, 1) + conv(c, c, 1, 1) + 2 * t * c as u64 + ffn;
    let wsml = scan_module_per_pixel(cfg.wsml_scan, c, cfg.n_state) + ffn;
    let gsml = scan_module_per_pixel(cfg.gsml_scan, c, cfg.n_state) + ffn;
    let msgm = conv(c, c, 3, c) + conv(c, c, 5, c) + conv(c, c, 7, c) + conv(c, c, 1, 1);
    let ahfrm = msgm + conv(c, c, 3, c) + 3 * conv(c, c, 1, 1) + conv(2 * c, c, 1, 1);
    let mut rows = Vec::new();
    for tag in cfg.stage_order.tags(cfg.blocks_per_group) {
        rows.push(match tag {
            StageTag::Tl => ("tl", tl),
            StageTag::Wsml => ("wsml", wsml),
            StageTag::Gsml => ("gsml", gsml),
        });
    }
    rows.push(("ahfrm", ahfrm));
    rows.push(("conv", conv(c, c, 3, 1)));
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub lr: (usize, usize),
    pub padded: (usize, usize),
    pub shallow: u64,
    pub groups: u64,
    pub hfca: u64,
    pub head: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.shallow + self.groups + self.hfca + self.head
    }
}

/// Multiply-accumulates to produce an `out_h x out_w` output.
pub fn flop_report(cfg: &ModelConfig, out_h: usize, out_w: usize) -> FlopReport {
    let r = cfg.scale;
    let (h, w) = (out_h.div_ceil(r), out_w.div_ceil(r));
    let m = cfg.pad_multiple();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let c = cfg.width;
    let per_pixel: u64 = group_per_pixel(cfg).iter().map(|(_, v)| v).sum();
    let hidden = (c / HFCA_REDUCTION).max(1);
    FlopReport {
        lr: (h, w),
        padded: (hp, wp),
        shallow: (h * w) as u64 * conv(3, c, 3, 1),
        groups: cfg.groups as u64 * (hp * wp) as u64 * per_pixel,
        hfca: cfg.groups as u64 * (2 * c * hidden) as u64,
        head: (h * w) as u64 * conv(c, 3 * r * r, 3, 1),
    }
}

pub fn count_flops(cfg: &ModelConfig, out_h: usize, out_w: usize) -> u64 {
    flop_report(cfg, out_h, out_w).total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_counts_closed_form() {
        let base = ModelConfig::default();
        let mut totals = Vec::new();
        for r in 2..=4 {
            totals.push(count_params(&ModelConfig { scale: r, ..base.clone() }).unwrap());
        }
        // only the head depends on the scale: 48*3r^2*9 + 3r^2
        assert_eq!(totals[1] - totals[0], 11_691 - 5_196);
        assert_eq!(totals[2] - totals[1], 20_784 - 11_691);
    }

    #[test]
    fn per_pixel_cost_matches_hand_count() {
        let rows = group_per_pixel(&ModelConfig::default());
        let get = |k: &str| rows.iter().find(|(n, _)| *n == k).unwrap().1;
        // qkv 6912 + proj 2304 + two 256-token products 24576 + ffn 4608
        assert_eq!(get("tl"), 38_400);
        assert_eq!(get("wsml"), 2 * 2304 + 432 + 2 * (24 * 18 + 2 * 24 + 3 * 24 * 8) + 4608);
        assert_eq!(get("conv"), 20_736);
    }

    #[test]
    fn doubling_blocks_doubles_block_subtotal() {
        let a = ModelConfig::default();
        let b = ModelConfig { blocks_per_group: 8, ..a.clone() };
        let block_sum = |cfg: &ModelConfig| -> usize {
            let m = TpmSr::new(cfg, 0).unwrap();
            let p = m.params();
            let tags = cfg.stage_order.tags(cfg.blocks_per_group);
            p.ids()
                .filter(|&id| {
                    let name = p.name(id);
                    name.starts_with("group0.layer")
                        && name["group0.layer".len()..]
                            .split('.')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .is_some_and(|i| tags[i] != StageTag::Gsml)
                })
                .map(|id| p.values(id).len())
                .sum()
        };
        assert_eq!(block_sum(&b), 2 * block_sum(&a));
    }
}
