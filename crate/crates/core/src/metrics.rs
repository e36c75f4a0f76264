//! Luma PSNR and SSIM with border shaving, and per-dataset reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::{rgb_to_y, ImageRgb};
use crate::error::{Error, Result};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// A single-channel image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} plane", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn luma(img: &ImageRgb) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: rgb_to_y(img),
        }
    }

    fn shaved(&self, shave: usize) -> Result<Plane> {
        if 2 * shave >= self.width.min(self.height) {
            return Err(Error::Shape(format!(
                "shave {shave} leaves nothing of {}x{}",
                self.height, self.width
            )));
        }
        let (w, h) = (self.width - 2 * shave, self.height - 2 * shave);
        let mut data = Vec::with_capacity(w * h);
        for y in shave..shave + h {
            data.extend_from_slice(&self.data[y * self.width + shave..y * self.width + shave + w]);
        }
        Ok(Plane { width: w, height: h, data })
    }
}

fn check_pair(a: &Plane, b: &Plane) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn psnr_plane(a: &Plane, b: &Plane, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.shaved(shave)?, b.shaved(shave)?);
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering with the normalised Gaussian window.
fn filter_valid(p: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (wo, ho) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

pub fn ssim_plane(a: &Plane, b: &Plane, shave: usize) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.shaved(shave)?, b.shaved(shave)?);
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{}x{} after shaving is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.height, a.width
        )));
    }
    let g = gaussian_window();
    let (w, h) = (a.width, a.height);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&a.data, w, h, &g);
    let mu_b = filter_valid(&b.data, w, h, &g);
    let e_aa = filter_valid(&prod(&a.data, &a.data), w, h, &g);
    let e_bb = filter_valid(&prod(&b.data, &b.data), w, h, &g);
    let e_ab = filter_valid(&prod(&a.data, &b.data), w, h, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

pub fn psnr_y(sr: &ImageRgb, hr: &ImageRgb, shave: usize) -> Result<f64> {
    psnr_plane(&Plane::luma(sr), &Plane::luma(hr), shave)
}

pub fn ssim_y(sr: &ImageRgb, hr: &ImageRgb, shave: usize) -> Result<f64> {
    ssim_plane(&Plane::luma(sr), &Plane::luma(hr), shave)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub method: String,
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores, possibly for several methods over the same images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub scale: usize,
    pub shave: usize,
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn new(scale: usize, shave: usize) -> Self {
        Self {
            scale,
            shave,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: &str, image: &str, sr: &ImageRgb, hr: &ImageRgb) -> Result<&ImageMetrics> {
        let row = ImageMetrics {
            method: method.to_string(),
            image: image.to_string(),
            psnr: psnr_y(sr, hr, self.shave)?,
            ssim: ssim_y(sr, hr, self.shave)?,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    /// Methods in first-seen order.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    /// Mean PSNR and SSIM of one method.
    pub fn mean(&self, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("x{} shave {}\n", self.scale, self.shave);
        s += &format!("{:<10} {:<28} {:>9} {:>8}\n", "method", "image", "psnr", "ssim");
        for r in &self.rows {
            s += &format!("{:<10} {:<28} {:>9.4} {:>8.5}\n", r.method, r.image, r.psnr, r.ssim);
        }
        for m in self.methods() {
            let (p, q) = self.mean(m).expect("method has rows");
            s += &format!("{:<10} {:<28} {:>9.4} {:>8.5}\n", m, "mean", p, q);
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        wr.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, scale: usize, shave: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<ImageMetrics>, _>>()
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self { scale, shave, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> Plane {
        Plane::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = plane(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f64 / 11.0);
        assert_eq!(psnr_plane(&a, &a, 2).unwrap(), PSNR_CAP);
        let c = plane(16, 16, |_, _| 0.5);
        let d = plane(16, 16, |_, _| 0.6);
        assert!((psnr_plane(&c, &d, 0).unwrap() - 20.0).abs() < 1e-9);
        let chk = plane(8, 8, |x, y| ((x + y) % 2) as f64);
        let inv = plane(8, 8, |x, y| 1.0 - ((x + y) % 2) as f64);
        assert_eq!(psnr_plane(&chk, &inv, 1).unwrap(), 0.0);
        assert!(psnr_plane(&a, &c.shaved(1).unwrap(), 0).is_err());
        assert!(psnr_plane(&a, &a, 8).is_err());
    }

    #[test]
    fn ssim_reference_values() {
        let a = plane(20, 20, |x, y| ((x * 5 + y * 3) % 13) as f64 / 13.0);
        assert_eq!(ssim_plane(&a, &a, 0).unwrap(), 1.0);
        let ramp = plane(11, 11, |x, y| (x + y) as f64 / 20.0);
        let inv = plane(11, 11, |x, y| 1.0 - (x + y) as f64 / 20.0);
        assert!(ssim_plane(&ramp, &inv, 0).unwrap() < 0.0);
        let (m1, m2) = (0.2, 0.7);
        let c = plane(12, 12, |_, _| m1);
        let d = plane(12, 12, |_, _| m2);
        let c1 = K1 * K1;
        let want = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim_plane(&c, &d, 0).unwrap() - want).abs() < 1e-12);
        assert!(ssim_plane(&c, &d, 1).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let hr = ImageRgb::from_fn(16, 16, |c, y, x| ((x + 2 * y + c) % 5) as f64 / 5.0);
        let sr = ImageRgb::from_fn(16, 16, |c, y, x| hr.get(c, y, x) * 0.9);
        let mut rep = MetricReport::new(2, 2);
        rep.push("model", "a", &sr, &hr).unwrap();
        rep.push("model", "b", &hr, &hr).unwrap();
        rep.push("bicubic", "a", &sr, &hr).unwrap();
        let (p, _) = rep.mean("model").unwrap();
        assert_eq!(p, (rep.rows[0].psnr + 100.0) / 2.0);
        assert_eq!(rep.methods(), vec!["model", "bicubic"]);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let back = MetricReport::read_csv(&buf[..], 2, 2).unwrap();
        assert_eq!(back, rep);
        assert!(rep.to_table().contains("mean"));
    }
}
