//! Bijective orderings between a 2-D grid and a 1-D scan sequence.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use pmsr_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutKind {
    /// Window-major scan; the role (interaction or fusion) is up to the caller.
    Window(usize),
    Cardinal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutMeta {
    pub kind: LayoutKind,
    pub axis: Axis,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanLayout {
    pub h: usize,
    pub w: usize,
    /// sequence position -> row-major grid index
    pub forward: Vec<usize>,
    /// row-major grid index -> sequence position
    pub inverse: Vec<usize>,
    pub meta: LayoutMeta,
}

fn invert(forward: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; forward.len()];
    for (i, &g) in forward.iter().enumerate() {
        inv[g] = i;
    }
    inv
}

/// Window-major order: windows in raster order along `axis`, tokens inside
/// each window in raster order along the same axis.
pub fn build_window_layout(h: usize, w: usize, window: usize, axis: Axis, direction: Direction) -> Result<ScanLayout> {
    if window == 0 || window > h || window > w {
        return Err(Error::Shape(format!("window {window} exceeds grid {h}x{w}")));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("grid {h}x{w} not divisible by window {window}")));
    }
    let (nh, nw) = (h / window, w / window);
    // (outer, inner) counts along the scan axis
    let raster = |n_rows: usize, n_cols: usize| -> Vec<(usize, usize)> {
        match axis {
            Axis::Horizontal => (0..n_rows).flat_map(|r| (0..n_cols).map(move |c| (r, c))).collect(),
            Axis::Vertical => (0..n_cols).flat_map(|c| (0..n_rows).map(move |r| (r, c))).collect(),
        }
    };
    let inner = raster(window, window);
    let mut forward = Vec::with_capacity(h * w);
    for (wr, wc) in raster(nh, nw) {
        for &(r, c) in &inner {
            forward.push((wr * window + r) * w + wc * window + c);
        }
    }
    if direction == Direction::Reverse {
        forward.reverse();
    }
    Ok(ScanLayout {
        h,
        w,
        inverse: invert(&forward),
        forward,
        meta: LayoutMeta {
            kind: LayoutKind::Window(window),
            axis,
            direction,
        },
    })
}

/// The four raster scans: `0` top-left to bottom-right, `1` its reversal,
/// `2` top-right to bottom-left (columns mirrored), `3` its reversal.
pub fn build_cardinal_layout(h: usize, w: usize, which: usize) -> Result<ScanLayout> {
    if which >= 4 {
        return Err(Error::Shape(format!("cardinal layout index {which} out of 0..4")));
    }
    let mirrored = which >= 2;
    let mut forward: Vec<usize> = (0..h)
        .flat_map(|r| (0..w).map(move |c| r * w + if mirrored { w - 1 - c } else { c }))
        .collect();
    let direction = if which % 2 == 1 {
        forward.reverse();
        Direction::Reverse
    } else {
        Direction::Forward
    };
    Ok(ScanLayout {
        h,
        w,
        inverse: invert(&forward),
        forward,
        meta: LayoutMeta {
            kind: LayoutKind::Cardinal(which),
            axis: Axis::Horizontal,
            direction,
        },
    })
}

/// `(axis, WIF direction, WFF direction)` for the `block_index`-th window
/// scan; a period-4 cycle covering both axes in both directions.
pub fn direction_schedule(block_index: usize) -> (Axis, Direction, Direction) {
    let (axis, dir) = match block_index % 4 {
        0 => (Axis::Horizontal, Direction::Forward),
        1 => (Axis::Vertical, Direction::Forward),
        2 => (Axis::Horizontal, Direction::Reverse),
        _ => (Axis::Vertical, Direction::Reverse),
    };
    (axis, dir, dir.flip())
}

type CacheKey = (usize, usize, LayoutKind, Axis, Direction);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<ScanLayout>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<ScanLayout>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn cached(key: CacheKey, build: impl FnOnce() -> Result<ScanLayout>) -> Result<Arc<ScanLayout>> {
    if let Some(l) = cache().lock().unwrap().get(&key) {
        return Ok(l.clone());
    }
    let layout = Arc::new(build()?);
    cache().lock().unwrap().insert(key, layout.clone());
    Ok(layout)
}

pub fn window_layout(h: usize, w: usize, window: usize, axis: Axis, direction: Direction) -> Result<Arc<ScanLayout>> {
    cached((h, w, LayoutKind::Window(window), axis, direction), || {
        build_window_layout(h, w, window, axis, direction)
    })
}

pub fn cardinal_layout(h: usize, w: usize, which: usize) -> Result<Arc<ScanLayout>> {
    let dir = if which % 2 == 1 { Direction::Reverse } else { Direction::Forward };
    cached((h, w, LayoutKind::Cardinal(which), Axis::Horizontal, dir), || {
        build_cardinal_layout(h, w, which)
    })
}

/// `[B, C, H, W] -> [B, H*W, C]` in the layout's sequence order.
pub fn gather(x: &Tensor, layout: &ScanLayout) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check_extent(layout, h, w)?;
    let l = h * w;
    let mut index = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for &g in &layout.forward {
            index.extend((0..c).map(|ci| (bi * c + ci) * l + g));
        }
    }
    Ok(x.gather(Arc::new(index), &[b, l, c])?)
}

/// Inverse of [`gather`]: `[B, H*W, C] -> [B, C, H, W]`.
pub fn scatter(seq: &Tensor, layout: &ScanLayout, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, c) = seq.dims3()?;
    check_extent(layout, h, w)?;
    if l != h * w {
        return Err(Error::Shape(format!("sequence of {l} for grid {h}x{w}")));
    }
    let mut index = Vec::with_capacity(b * l * c);
    for bi in 0..b {
        for ci in 0..c {
            index.extend(layout.inverse.iter().map(|&p| (bi * l + p) * c + ci));
        }
    }
    Ok(seq.gather(Arc::new(index), &[b, c, h, w])?)
}

fn check_extent(layout: &ScanLayout, h: usize, w: usize) -> Result<()> {
    if layout.h != h || layout.w != w {
        return Err(Error::Shape(format!(
            "layout built for {}x{}, tensor is {h}x{w}",
            layout.h, layout.w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_example_4x4() {
        let l = build_window_layout(4, 4, 2, Axis::Horizontal, Direction::Forward).unwrap();
        assert_eq!(l.forward, vec![0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        let r = build_window_layout(4, 4, 2, Axis::Horizontal, Direction::Reverse).unwrap();
        let mut rev = l.forward.clone();
        rev.reverse();
        assert_eq!(r.forward, rev);
        let v = build_window_layout(4, 4, 2, Axis::Vertical, Direction::Forward).unwrap();
        assert_eq!(v.forward, vec![0, 4, 1, 5, 8, 12, 9, 13, 2, 6, 3, 7, 10, 14, 11, 15]);
    }

    #[test]
    fn single_window_is_raster() {
        let l = build_window_layout(8, 8, 8, Axis::Horizontal, Direction::Forward).unwrap();
        assert_eq!(l.forward, (0..64).collect::<Vec<_>>());
        assert!(build_window_layout(8, 8, 16, Axis::Horizontal, Direction::Forward).is_err());
        assert!(build_window_layout(12, 8, 8, Axis::Horizontal, Direction::Forward).is_err());
    }

    #[test]
    fn cardinal_2x2() {
        let f = |k| build_cardinal_layout(2, 2, k).unwrap().forward;
        assert_eq!(f(0), vec![0, 1, 2, 3]);
        assert_eq!(f(1), vec![3, 2, 1, 0]);
        assert_eq!(f(2), vec![1, 0, 3, 2]);
        assert_eq!(f(3), vec![2, 3, 0, 1]);
        assert!(build_cardinal_layout(2, 2, 4).is_err());
    }

    #[test]
    fn schedule_cycle() {
        let seen: std::collections::HashSet<_> = (0..4).map(|i| {
            let (a, wif, wff) = direction_schedule(i);
            assert_ne!(wif, wff);
            (a, wif)
        }).collect();
        assert_eq!(seen.len(), 4);
        assert_eq!(direction_schedule(4), direction_schedule(0));
    }

    #[test]
    fn one_hot_lands_at_inverse_position() {
        let l = build_window_layout(4, 8, 4, Axis::Vertical, Direction::Reverse).unwrap();
        let mut v = vec![0.0; 32];
        v[13] = 1.0;
        let x = Tensor::new(v, &[1, 1, 4, 8]).unwrap();
        let seq = gather(&x, &l).unwrap();
        let pos = seq.data().iter().position(|&q| q == 1.0).unwrap();
        assert_eq!(pos, l.inverse[13]);
        let back = scatter(&seq, &l, 4, 8).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn cache_returns_shared_layout() {
        let a = window_layout(32, 32, 16, Axis::Vertical, Direction::Forward).unwrap();
        let b = window_layout(32, 32, 16, Axis::Vertical, Direction::Forward).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cardinal_layout(4, 4, 3).unwrap().forward, build_cardinal_layout(4, 4, 3).unwrap().forward);
    }
}
