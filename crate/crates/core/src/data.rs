//! Images, bicubic degradation, luma, training patches and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use pmsr_tensor::{SplitMix64, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image with values in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(w, h, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[1, 3, self.height, self.width]).expect("consistent extents")
    }

    /// Stacks images of equal size into `[B, 3, H, W]`.
    pub fn batch(images: &[&ImageRgb]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.width, im.height) != (first.width, first.height) {
                return Err(Error::Shape("batch images differ in size".into()));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::new(data, &[images.len(), 3, first.height, first.width])?)
    }

    /// Image `index` of a `[B, 3, H, W]` tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 || index >= b {
            return Err(Error::Shape(format!("cannot take RGB image {index} from {:?}", t.shape())));
        }
        let n = 3 * h * w;
        Ok(Self::new(w, h, t.data()[index * n..(index + 1) * n].to_vec())?.clamped())
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Reads an 8- or 16-bit PNG; gray and alpha variants are promoted to RGB.
pub fn load_png(path: &Path) -> Result<ImageRgb> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| image_err(path, e))?;
    use image::ColorType::*;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img.color() {
        L8 | La8 | Rgb8 | Rgba8 => {
            let rgb = img.to_rgb8();
            planar(&rgb, w, h, |v: u8| v as f64 / 255.0)
        }
        L16 | La16 | Rgb16 | Rgba16 => {
            let rgb = img.to_rgb16();
            planar(&rgb, w, h, |v: u16| v as f64 / 65535.0)
        }
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    ImageRgb::new(w, h, data)
}

fn planar<T: Copy>(interleaved: &[T], w: usize, h: usize, f: impl Fn(T) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * w * h];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = f(px[c]);
        }
    }
    out
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(img: &ImageRgb, path: &Path) -> Result<()> {
    let n = img.width * img.height;
    let mut buf = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push(quantize_u8(img.data[c * n + i]));
        }
    }
    save_rgb8(&buf, img.width, img.height, path)
}

/// Writes an 8-bit grayscale PNG from values in `[0, 1]`.
pub fn save_gray_png(plane: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    let buf: Vec<u8> = plane.iter().map(|&v| quantize_u8(v)).collect();
    image::save_buffer_with_format(path, &buf, width as u32, height as u32, image::ExtendedColorType::L8, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn save_rgb8(buf: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    image::save_buffer_with_format(path, buf, width as u32, height as u32, image::ExtendedColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let (ax2, ax3) = (ax * ax, ax * ax * ax);
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax < 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for each output sample of a 1-D resize.
/// Downscaling widens the kernel by the inverse scale; out-of-range taps
/// mirror back into the signal.
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let mirror = |i: isize| -> usize {
        let n = n_in as isize;
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    (0..n_out)
        .map(|o| {
            // 1-based source coordinate of output sample o + 1
            let u = (o as f64 + 1.0) / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let taps = width.ceil() as isize + 2;
            let mut raw: Vec<(usize, f64)> = (0..taps)
                .map(|j| {
                    let idx = left + j;
                    (mirror(idx - 1), kscale * cubic(kscale * (u - idx as f64)))
                })
                .filter(|&(_, wgt)| wgt != 0.0)
                .collect();
            let sum: f64 = raw.iter().map(|t| t.1).sum();
            raw.iter_mut().for_each(|t| t.1 /= sum);
            raw
        })
        .collect()
}

fn resize_axis(src: &[f64], rows: usize, cols: usize, taps: &[Vec<(usize, f64)>], along_rows: bool) -> Vec<f64> {
    if along_rows {
        // resample each column: out is taps.len() x cols
        let mut out = vec![0.0; taps.len() * cols];
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut out[o * cols..(o + 1) * cols];
            for &(i, wgt) in t {
                for (d, s) in dst.iter_mut().zip(&src[i * cols..(i + 1) * cols]) {
                    *d += wgt * s;
                }
            }
        }
        out
    } else {
        let mut out = vec![0.0; rows * taps.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            for (o, t) in taps.iter().enumerate() {
                out[r * taps.len() + o] = t.iter().map(|&(i, wgt)| wgt * row[i]).sum();
            }
        }
        out
    }
}

/// Antialiased bicubic resize of each channel, rows first.
pub fn bicubic_resize(img: &ImageRgb, out_h: usize, out_w: usize) -> Result<ImageRgb> {
    if out_h == 0 || out_w == 0 || img.width == 0 || img.height == 0 {
        return Err(Error::Shape(format!("resize {}x{} -> {out_h}x{out_w}", img.height, img.width)));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let (th, tw) = (resize_taps(img.height, out_h), resize_taps(img.width, out_w));
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    let plane = img.width * img.height;
    for c in 0..3 {
        let src = &img.data[c * plane..(c + 1) * plane];
        let tmp = resize_axis(src, img.height, img.width, &th, true);
        data.extend(resize_axis(&tmp, out_h, img.width, &tw, false));
    }
    ImageRgb::new(out_w, out_h, data)
}

/// LR counterpart of an HR image whose extents are multiples of `r`.
pub fn bicubic_down(hr: &ImageRgb, r: usize) -> Result<ImageRgb> {
    if r == 0 || hr.width % r != 0 || hr.height % r != 0 {
        return Err(Error::Shape(format!("{}x{} not divisible by scale {r}", hr.height, hr.width)));
    }
    bicubic_resize(hr, hr.height / r, hr.width / r)
}

/// Studio-swing BT.601 luma in `[16/255, 235/255]`.
pub fn rgb_to_y(img: &ImageRgb) -> Vec<f64> {
    let n = img.width * img.height;
    (0..n)
        .map(|i| (16.0 + 65.481 * img.data[i] + 128.553 * img.data[n + i] + 24.966 * img.data[2 * n + i]) / 255.0)
        .collect()
}

/// One of the eight symmetries of the square: `rot` quarter turns
/// counter-clockwise applied after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral { flip: i >= 4, rot: i % 4 })
    }

    pub fn random(rng: &mut SplitMix64) -> Self {
        let i = rng.below(8) as u8;
        Dihedral { flip: i >= 4, rot: i % 4 }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Dihedral {
                flip: false,
                rot: (4 - self.rot) % 4,
            }
        }
    }

    pub fn apply(self, img: &ImageRgb) -> ImageRgb {
        let mut out = if self.flip {
            ImageRgb::from_fn(img.width, img.height, |c, y, x| img.get(c, y, img.width - 1 - x))
        } else {
            img.clone()
        };
        for _ in 0..self.rot {
            // counter-clockwise quarter turn
            let src = out;
            out = ImageRgb::from_fn(src.height, src.width, |c, y, x| src.get(c, x, src.width - 1 - y));
        }
        out
    }
}

/// Where a training pair came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub offset: (usize, usize),
    pub transform: Dihedral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub hr: ImageRgb,
    pub lr: ImageRgb,
    pub provenance: Provenance,
}

/// Random `r*patch` HR crop and its bicubic LR counterpart.
pub fn sample_patch(hr: &ImageRgb, source: &str, r: usize, patch: usize, rng: &mut SplitMix64) -> Result<PairedSample> {
    let size = r * patch;
    if hr.width < size || hr.height < size {
        return Err(Error::Data(format!(
            "{source}: {}x{} is smaller than the {size}x{size} crop",
            hr.height, hr.width
        )));
    }
    let top = rng.below(hr.height - size + 1);
    let left = rng.below(hr.width - size + 1);
    let crop = hr.crop(top, left, size, size)?;
    let lr = bicubic_down(&crop, r)?;
    Ok(PairedSample {
        hr: crop,
        lr,
        provenance: Provenance {
            source: source.to_string(),
            offset: (top, left),
            transform: Dihedral::IDENTITY,
        },
    })
}

/// Applies one uniformly drawn dihedral transform to both images.
pub fn augment(sample: &PairedSample, rng: &mut SplitMix64) -> PairedSample {
    transform_sample(sample, Dihedral::random(rng))
}

pub fn transform_sample(sample: &PairedSample, d: Dihedral) -> PairedSample {
    PairedSample {
        hr: d.apply(&sample.hr),
        lr: d.apply(&sample.lr),
        provenance: Provenance {
            transform: d,
            ..sample.provenance.clone()
        },
    }
}

/// HR images of a dataset directory: `<root>/HR/*.png`, or `<root>/*.png`
/// when there is no `HR` subdirectory. Sorted by file name.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<(String, ImageRgb)>,
}

pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

impl Dataset {
    pub fn load_dir(root: &Path) -> Result<Self> {
        let hr = root.join("HR");
        let dir = if hr.is_dir() { hr } else { root.to_path_buf() };
        let images = list_pngs(&dir)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                Ok((name, load_png(&p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::Data(format!("no PNG images in {}", dir.display())));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Procedural test image: a smooth background with sharp shapes, stripes
/// and fine texture, so there is detail for super-resolution to recover.
pub fn synth_image(width: usize, height: usize, seed: u64) -> ImageRgb {
    let mut rng = SplitMix64::new(seed);
    let color = |rng: &mut SplitMix64| [rng.next_f64(), rng.next_f64(), rng.next_f64()];
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = (width + height) as f64;
    let mut data = vec![0.0; 3 * width * height];
    let plane = width * height;
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 * ca + y as f64 * sa) / diag + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * plane + y * width + x] = c0[c] + t * (c1[c] - c0[c]);
            }
        }
    }
    let mut paint = |inside: &dyn Fn(f64, f64) -> Option<f64>, col: [f64; 3]| {
        for y in 0..height {
            for x in 0..width {
                if let Some(alpha) = inside(x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        let v = &mut data[c * plane + y * width + x];
                        *v += alpha * (col[c] - *v);
                    }
                }
            }
        }
    };
    let (w, h) = (width as f64, height as f64);
    for _ in 0..3 + rng.below(4) {
        let col = color(&mut rng);
        let (cx, cy) = (rng.uniform(0.0, w), rng.uniform(0.0, h));
        let size = rng.uniform(0.05, 0.3) * w.min(h);
        match rng.below(4) {
            0 => paint(&|x, y| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() < size).then_some(1.0), col),
            1 => paint(&|x, y| ((x - cx).abs() < size && (y - cy).abs() < 0.6 * size).then_some(1.0), col),
            2 => {
                let period = rng.uniform(3.0, 9.0);
                let phase = rng.uniform(0.0, period);
                let (ux, uy) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
                let norm = (ux * ux + uy * uy).sqrt().max(1e-3);
                paint(
                    &|x, y| {
                        let inside = (x - cx).abs() < 1.5 * size && (y - cy).abs() < 1.5 * size;
                        let s = ((x * ux + y * uy) / norm + phase).rem_euclid(period) < period / 2.0;
                        (inside && s).then_some(0.8)
                    },
                    col,
                )
            }
            _ => {
                let thick = rng.uniform(1.0, 3.0);
                let (dx, dy) = (rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0));
                let norm = (dx * dx + dy * dy).sqrt().max(1e-3);
                paint(&|x, y| (((x - cx) * dy - (y - cy) * dx).abs() / norm < thick).then_some(1.0), col)
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + rng.uniform(-0.02, 0.02)).clamp(0.0, 1.0);
    }
    ImageRgb { width, height, data }
}

/// Writes `n` synthetic images to `<dir>/HR/` and returns their paths.
pub fn write_synthetic_dataset(dir: &Path, n: usize, width: usize, height: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let hr = dir.join("HR");
    fs::create_dir_all(&hr).map_err(|e| Error::io(&hr, e))?;
    (0..n)
        .map(|i| {
            let p = hr.join(format!("synth_{i:03}.png"));
            save_png(&synth_image(width, height, seed.wrapping_add(i as u64)), &p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_reference_points() {
        let white = ImageRgb::from_fn(1, 1, |_, _, _| 1.0);
        let black = ImageRgb::from_fn(1, 1, |_, _, _| 0.0);
        assert!((rgb_to_y(&white)[0] - 235.0 / 255.0).abs() < 1e-12);
        assert!((rgb_to_y(&black)[0] - 16.0 / 255.0).abs() < 1e-15);
        for g in [0.1, 0.5, 0.9] {
            let gray = ImageRgb::from_fn(1, 1, |_, _, _| g);
            assert!((rgb_to_y(&gray)[0] - (16.0 + 219.0 * g) / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert_eq!(cubic(0.5), 0.5625);
        assert_eq!(cubic(1.5), -0.0625);
    }

    #[test]
    fn taps_are_normalised() {
        for (a, b) in [(10, 5), (12, 4), (9, 3), (5, 10), (7, 7), (13, 6)] {
            for t in resize_taps(a, b) {
                assert!((t.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_constant_and_ramp() {
        let img = synth_image(12, 10, 1);
        assert_eq!(bicubic_resize(&img, 10, 12).unwrap(), img);
        let flat = ImageRgb::from_fn(16, 12, |_, _, _| 0.37);
        for (h, w) in [(6, 8), (4, 4), (24, 32), (5, 7)] {
            let r = bicubic_resize(&flat, h, w).unwrap();
            assert!(r.data.iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
        // a horizontal ramp stays linear away from the mirrored borders
        let ramp = ImageRgb::from_fn(32, 8, |_, _, x| 0.01 * x as f64);
        let d = bicubic_down(&ramp, 2).unwrap();
        for x in 3..13 {
            let step = d.get(0, 2, x + 1) - d.get(0, 2, x);
            assert!((step - 0.02).abs() < 1e-9, "x {x}: {step}");
        }
    }

    #[test]
    fn dihedral_group() {
        let img = synth_image(5, 3, 2);
        let mut seen = std::collections::HashSet::new();
        for d in Dihedral::all() {
            let t = d.apply(&img);
            assert_eq!(d.inverse().apply(&t), img);
            seen.insert(format!("{:?}", t.data));
        }
        assert_eq!(seen.len(), 8);
        // one counter-clockwise turn maps the top-right pixel to the top-left
        let r = Dihedral { flip: false, rot: 1 }.apply(&img);
        assert_eq!((r.width, r.height), (3, 5));
        assert_eq!(r.get(0, 0, 0), img.get(0, 0, 4));
    }

    #[test]
    fn patch_sampling_is_seeded_and_consistent() {
        let img = synth_image(40, 36, 3);
        let a = sample_patch(&img, "x", 2, 8, &mut SplitMix64::new(5)).unwrap();
        let b = sample_patch(&img, "x", 2, 8, &mut SplitMix64::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.lr.width, a.hr.width), (8, 16));
        assert_eq!(a.lr, bicubic_down(&a.hr, 2).unwrap());
        assert!(sample_patch(&img, "x", 4, 10, &mut SplitMix64::new(5)).is_err());
    }
}
