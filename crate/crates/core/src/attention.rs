//! Non-shifted window multi-head self-attention with a learned relative
//! position bias.

use std::sync::Arc;

use pmsr_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Linear, RESIDUAL_GAIN};
use crate::params::{Init, ParamId, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowAttentionConfig {
    pub window: usize,
    pub heads: usize,
    pub dim: usize,
}

impl WindowAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {} must be divisible by heads {} (window {})",
                self.dim, self.heads, self.window
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }
}

fn partition_index(b: usize, c: usize, h: usize, w: usize, win: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wr in 0..h / win {
            for wc in 0..w / win {
                for r in 0..win {
                    for q in 0..win {
                        let g = (wr * win + r) * w + wc * win + q;
                        index.extend((0..c).map(|ci| (bi * c + ci) * h * w + g));
                    }
                }
            }
        }
    }
    index
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Shape(format!("extent {h}x{w} not divisible by window {window}")));
    }
    Ok(())
}

/// `[B, C, H, W] -> [B * nw, window², C]`, windows in raster order and
/// tokens row-major inside each window.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    check_divisible(h, w, window)?;
    let nw = (h / window) * (w / window);
    let index = partition_index(b, c, h, w, window);
    Ok(x.gather(Arc::new(index), &[b * nw, window * window, c])?)
}

/// Inverse of [`window_partition`].
pub fn window_merge(xw: &Tensor, window: usize, h: usize, w: usize) -> Result<Tensor> {
    let (bw, t, c) = xw.dims3()?;
    check_divisible(h, w, window)?;
    let nw = (h / window) * (w / window);
    if t != window * window || bw % nw != 0 {
        return Err(Error::Shape(format!("{:?} cannot merge into {h}x{w} with window {window}", xw.shape())));
    }
    let b = bw / nw;
    let fwd = partition_index(b, c, h, w, window);
    let mut index = vec![0; fwd.len()];
    for (src, &dst) in fwd.iter().enumerate() {
        index[dst] = src;
    }
    Ok(xw.gather(Arc::new(index), &[b, c, h, w])?)
}

/// `softmax(q kᵀ / sqrt(d) + bias) v` over the last two axes. Returns the
/// output and the attention weights.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let dh = *q.shape().last().ok_or_else(|| Error::Shape("attention on a scalar".into()))?;
    Ok(q.attention(k, v, bias, 1.0 / (dh as f64).sqrt())?)
}

/// Offsets `(dy, dx)` inside one window mapped to table rows.
fn rel_index(window: usize, heads: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for i in 0..t {
            let (yi, xi) = (i / window, i % window);
            for j in 0..t {
                let (yj, xj) = (j / window, j % window);
                let row = (yi + window - 1 - yj) * span + (xi + window - 1 - xj);
                index.push(row * heads + h);
            }
        }
    }
    index
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    cfg: WindowAttentionConfig,
    qkv: Linear,
    proj: Linear,
    rel_bias: ParamId,
    rel_index: Arc<Vec<usize>>,
}

impl WindowAttention {
    pub fn new(init: &mut Init, name: &str, cfg: WindowAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = init.sub(name);
        let span = 2 * cfg.window - 1;
        Ok(Self {
            cfg,
            qkv: Linear::new(&mut p, "qkv", cfg.dim, 3 * cfg.dim, true, 1.0),
            proj: Linear::new(&mut p, "proj", cfg.dim, cfg.dim, true, RESIDUAL_GAIN),
            rel_bias: p.normal("rel_bias", &[span * span, cfg.heads], 0.02),
            rel_index: Arc::new(rel_index(cfg.window, cfg.heads)),
        })
    }

    pub fn config(&self) -> WindowAttentionConfig {
        self.cfg
    }

    pub fn bias(&self, s: &Session) -> Result<Tensor> {
        let t = self.cfg.tokens();
        Ok(s.p(self.rel_bias).gather(self.rel_index.clone(), &[self.cfg.heads, t, t])?)
    }

    /// Attention over pre-partitioned windows `[Bw, window², C]`; returns
    /// the projected output and the weights `[Bw, heads, T, T]`.
    pub fn forward_windows(&self, s: &Session, xw: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bw, t, c) = xw.dims3()?;
        let WindowAttentionConfig { heads, dim, .. } = self.cfg;
        if c != dim || t != self.cfg.tokens() {
            return Err(Error::Shape(format!("windows {:?} for config {:?}", xw.shape(), self.cfg)));
        }
        let dh = dim / heads;
        let qkv = self
            .qkv
            .forward(s, xw)?
            .reshape(&[bw, t, 3, heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(0, i, 1)?.reshape(&[bw, heads, t, dh])?) };
        let bias = self.bias(s)?;
        let (out, attn) = scaled_dot_attention(&part(0)?, &part(1)?, &part(2)?, Some(&bias))?;
        let merged = out.permute(&[0, 2, 1, 3])?.reshape(&[bw, t, dim])?;
        Ok((self.proj.forward(s, &merged)?, attn))
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let xw = window_partition(x, self.cfg.window)?;
        let (out, _) = self.forward_windows(s, &xw)?;
        window_merge(&out, self.cfg.window, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use pmsr_tensor::SplitMix64;

    #[test]
    fn partition_tiles_and_round_trips() {
        let mut rng = SplitMix64::new(1);
        let x = Tensor::rand_uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        let xw = window_partition(&x, 16).unwrap();
        assert_eq!(xw.shape(), &[8, 256, 3]);
        assert_eq!(window_merge(&xw, 16, 32, 32).unwrap().data(), x.data());
        let one = window_partition(&Tensor::zeros(&[1, 2, 16, 16]), 16).unwrap();
        assert_eq!(one.shape(), &[1, 256, 2]);
        // second window of the first image starts at column 16
        assert_eq!(xw.data()[256 * 3], x.data()[16]);
        assert!(window_partition(&Tensor::zeros(&[1, 1, 24, 32]), 16).is_err());
    }

    #[test]
    fn two_token_softmax_by_hand() {
        let q = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let k = Tensor::new(vec![1.0, 2.0, 0.5, -1.0], &[2, 2]).unwrap();
        let v = Tensor::new(vec![1.0, 10.0, -3.0, 4.0], &[2, 2]).unwrap();
        let (out, attn) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        let s = 2f64.sqrt();
        // query 0 scores: [1, 0.5]/sqrt2; query 1: [2, -1]/sqrt2
        for (row, (s0, s1)) in [(1.0 / s, 0.5 / s), (2.0 / s, -1.0 / s)].into_iter().enumerate() {
            let (e0, e1) = (f64::exp(s0), f64::exp(s1));
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            assert!((attn.data()[row * 2] - p0).abs() < 1e-15);
            assert!((out.data()[row * 2] - (p0 * 1.0 + p1 * -3.0)).abs() < 1e-14);
            assert!((out.data()[row * 2 + 1] - (p0 * 10.0 + p1 * 4.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn rows_are_stochastic_and_identical_tokens_attend_uniformly() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(5);
        let cfg = WindowAttentionConfig { window: 4, heads: 2, dim: 8 };
        let att = WindowAttention::new(&mut Init::new(&mut store, &mut rng), "a", cfg).unwrap();
        let s = Session::inference(&store);
        let xw = Tensor::rand_uniform(&[3, 16, 8], -2.0, 2.0, &mut rng);
        let (out, attn) = att.forward_windows(&s, &xw).unwrap();
        assert_eq!(out.shape(), &[3, 16, 8]);
        for row in attn.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // zero the bias table: identical tokens then give uniform weights
        store.values_mut(store.find("a.rel_bias").unwrap()).fill(0.0);
        let s = Session::inference(&store);
        let same = Tensor::from_fn(&[1, 16, 8], |i| (i % 8) as f64 * 0.1);
        let (out, attn) = att.forward_windows(&s, &same).unwrap();
        assert!(attn.data().iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-14));
        for tok in out.data().chunks(8) {
            assert!(tok.iter().zip(&out.data()[..8]).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn relative_index_is_translation_invariant() {
        let idx = rel_index(3, 1);
        // token pairs with the same offset share a table row
        assert_eq!(idx[0 * 9 + 4], idx[4 * 9 + 8]);
        assert_eq!(idx[0], idx[8 * 9 + 8]);
        assert_eq!(*idx.iter().max().unwrap(), 24);
    }
}
