//! Input-gradient receptive fields and high-frequency energy around the
//! refinement modules.

use pmsr_tensor::{SplitMix64, Tensor};

use crate::error::{Error, Result};
use crate::freq::{ac_energy, hfm};
use crate::metrics::Plane;
use crate::model::{ProbeStage, TpmSr};
use crate::params::Session;

/// Gradient magnitudes at or below this count as no influence.
pub const SUPPORT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct RfReport {
    pub stage: ProbeStage,
    /// `sum_c |d y_center / d x_c|` per input pixel.
    pub magnitude: Plane,
    /// Fraction of pixels above [`SUPPORT_THRESHOLD`].
    pub coverage: f64,
    /// Inclusive `(top, left, bottom, right)` of the support, if any.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

impl RfReport {
    pub fn support(&self) -> Vec<bool> {
        self.magnitude.data.iter().map(|&v| v > SUPPORT_THRESHOLD).collect()
    }

    /// Min-max normalised magnitude, for rendering.
    pub fn heatmap(&self) -> Plane {
        let max = self.magnitude.data.iter().cloned().fold(0.0, f64::max);
        let min = self.magnitude.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let span = if max > min { max - min } else { 1.0 };
        Plane {
            width: self.magnitude.width,
            height: self.magnitude.height,
            data: self.magnitude.data.iter().map(|v| (v - min) / span).collect(),
        }
    }
}

/// Gradient of the channel-summed feature at the centre pixel with respect
/// to a random `h x w` input.
pub fn receptive_field(model: &TpmSr, stage: ProbeStage, h: usize, w: usize, seed: u64) -> Result<RfReport> {
    let mut rng = SplitMix64::new(seed);
    let x = Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng).with_grad();
    let s = Session::training(model.params());
    let y = model.probe(&s, &x, stage)?;
    let (_, c, ho, wo) = y.dims4()?;
    let (cy, cx) = (ho / 2, wo / 2);
    let mask = Tensor::from_fn(&[1, c, ho, wo], |i| if i % (ho * wo) == cy * wo + cx { 1.0 } else { 0.0 });
    y.mul(&mask)?.sum().backward()?;
    let g = x.grad().ok_or(Error::NonFinite("input gradient"))?;
    let plane = h * w;
    let magnitude: Vec<f64> = (0..plane).map(|i| (0..3).map(|ch| g[ch * plane + i].abs()).sum()).collect();
    if magnitude.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input gradient"));
    }
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    let mut count = 0;
    for (i, &m) in magnitude.iter().enumerate() {
        if m > SUPPORT_THRESHOLD {
            count += 1;
            let (y, x) = (i / w, i % w);
            bbox = Some(match bbox {
                None => (y, x, y, x),
                Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
            });
        }
    }
    Ok(RfReport {
        stage,
        magnitude: Plane::new(w, h, magnitude)?,
        coverage: count as f64 / plane as f64,
        bbox,
    })
}

/// `||hfm(f)||^2 / ||f - mean||^2` per channel, summed over channels.
pub fn high_pass_ratio(f: &Tensor) -> Result<f64> {
    let high = hfm(f)?;
    let total = ac_energy(f)?;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(high.square().sum().item()? / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFreq {
    pub group: usize,
    /// High-pass energy of the features entering the refinement module.
    pub before: f64,
    /// High-pass energy of its output.
    pub after: f64,
    pub ac_before: f64,
    pub ac_after: f64,
}

impl GroupFreq {
    pub fn ratio(&self) -> f64 {
        if self.before == 0.0 {
            f64::INFINITY
        } else {
            self.after / self.before
        }
    }
}

#[derive(Debug, Clone)]
pub struct FreqReport {
    pub groups: Vec<GroupFreq>,
    /// Channel-mean absolute high-pass maps before and after each module.
    pub maps: Vec<(Plane, Plane)>,
}

fn mean_abs_map(t: &Tensor) -> Result<Plane> {
    let (_, c, h, w) = t.dims4()?;
    let d = t.data();
    let data = (0..h * w)
        .map(|i| (0..c).map(|ch| d[ch * h * w + i].abs()).sum::<f64>() / c as f64)
        .collect();
    Plane::new(w, h, data)
}

pub fn frequency_probe(model: &TpmSr, x: &Tensor) -> Result<FreqReport> {
    let s = Session::inference(model.params());
    let feats = model.group_features(&s, x)?;
    let mut groups = Vec::new();
    let mut maps = Vec::new();
    for (g, group) in model.groups().iter().enumerate() {
        let x_in = &feats[g];
        let x_lf = group.forward_layers(&s, x_in, group.layers().len())?;
        let out = group.ahfrm().forward(&s, x_in, &x_lf)?;
        let (hb, ha) = (hfm(&x_lf)?, hfm(&out)?);
        groups.push(GroupFreq {
            group: g,
            before: hb.square().sum().item()?,
            after: ha.square().sum().item()?,
            ac_before: ac_energy(&x_lf)?,
            ac_after: ac_energy(&out)?,
        });
        maps.push((mean_abs_map(&hb)?, mean_abs_map(&ha)?));
    }
    Ok(FreqReport { groups, maps })
}

impl FreqReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>14} {:>14} {:>9} {:>14} {:>14}\n",
            "group", "hf_before", "hf_after", "ratio", "ac_before", "ac_after"
        );
        for g in &self.groups {
            s += &format!(
                "{:<6} {:>14.6e} {:>14.6e} {:>9.4} {:>14.6e} {:>14.6e}\n",
                g.group,
                g.before,
                g.after,
                g.ratio(),
                g.ac_before,
                g.ac_after
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn high_pass_ratio_extremes() {
        let checker = Tensor::from_fn(&[1, 1, 8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(high_pass_ratio(&checker).unwrap(), 1.0);
        assert_eq!(high_pass_ratio(&Tensor::full(&[1, 2, 4, 4], 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn desk_probes_run() {
        let m = TpmSr::new(&ModelConfig::preset("desk").unwrap(), 3).unwrap();
        let rf = receptive_field(&m, ProbeStage::Tl, 16, 16, 1).unwrap();
        assert!(rf.coverage > 0.0 && rf.coverage <= 1.0);
        assert!(rf.support()[8 * 16 + 8]);
        let hm = rf.heatmap();
        assert!(hm.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(2));
        let fr = frequency_probe(&m, &x).unwrap();
        assert_eq!(fr.groups.len(), 1);
        assert!(fr.groups[0].before > 0.0);
        assert!(fr.to_table().contains("ratio"));
    }
}
