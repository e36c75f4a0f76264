//! Diagonal selective state-space scan.
//!
//! Shapes follow `[batch, length, channels]`; 2-D inputs are treated as a
//! batch of one. The state of channel `c` has `N` entries with continuous
//! decay `a = -exp(a_log[c, n])`.

use std::sync::Arc;

use pmsr_tensor::{SplitMix64, Tensor};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, Session};

/// Below this `|Δa|` the zero-order-hold drive uses its first-order series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Zero-order-hold coefficients `(Ā, β)` for one diagonal entry, where the
/// discrete drive is `B̄ = β·B`.
pub fn zoh_coefficients(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let a_bar = z.exp();
    let beta = if z.abs() < ZOH_SERIES_THRESHOLD {
        delta * (1.0 + 0.5 * z)
    } else {
        z.exp_m1() / a
    };
    (a_bar, beta)
}

/// d/dz of `expm1(z)/z`.
fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else if z < -700.0 {
        1.0 / (z * z)
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `(Ā, β, ∂Ā/∂Δ, ∂β/∂Δ, ∂Ā/∂a, ∂β/∂a)`.
fn zoh_partials(a: f64, delta: f64) -> [f64; 6] {
    let (a_bar, beta) = zoh_coefficients(a, delta);
    let (dab_dd, dab_da) = if a_bar == 0.0 { (0.0, 0.0) } else { (a * a_bar, delta * a_bar) };
    [a_bar, beta, dab_dd, a_bar, dab_da, delta * delta * phi_prime(delta * a)]
}

/// Materialised discretisation of one sequence: `[L, d, N]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub len: usize,
    pub channels: usize,
    pub n_state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar_x: Vec<f64>,
}

/// Discretises a diagonal system for one sequence.
///
/// `a_diag` is `[d, N]`, `b` is `[L, N]`, `delta` and `x` are `[L, d]`.
pub fn discretize_zoh(a_diag: &[f64], n_state: usize, b: &[f64], delta: &[f64], x: &[f64]) -> Result<DiscreteSsm> {
    if n_state == 0 || a_diag.len() % n_state != 0 {
        return Err(Error::Shape(format!("a_diag of {} entries with N = {n_state}", a_diag.len())));
    }
    let d = a_diag.len() / n_state;
    let len = b.len() / n_state;
    if b.len() != len * n_state || delta.len() != len * d || x.len() != len * d {
        return Err(Error::Shape(format!(
            "discretize_zoh: b {} delta {} x {} for d = {d}, N = {n_state}",
            b.len(),
            delta.len(),
            x.len()
        )));
    }
    let mut a_bar = vec![0.0; len * d * n_state];
    let mut b_bar_x = vec![0.0; len * d * n_state];
    for t in 0..len {
        for c in 0..d {
            let dt = delta[t * d + c];
            for k in 0..n_state {
                let (ab, beta) = zoh_coefficients(a_diag[c * n_state + k], dt);
                let o = (t * d + c) * n_state + k;
                a_bar[o] = ab;
                b_bar_x[o] = beta * b[t * n_state + k] * x[t * d + c];
            }
        }
    }
    Ok(DiscreteSsm {
        len,
        channels: d,
        n_state,
        a_bar,
        b_bar_x,
    })
}

#[derive(Clone, Copy)]
struct ScanDims {
    batch: usize,
    len: usize,
    d: usize,
    n: usize,
}

fn scan_dims(u: &Tensor, delta: &Tensor, a_log: &Tensor, b: &Tensor, c: &Tensor, d_skip: &Tensor) -> Result<ScanDims> {
    let (batch, len, d) = match *u.shape() {
        [l, d] => (1, l, d),
        [bs, l, d] => (bs, l, d),
        _ => return Err(Error::Shape(format!("scan input must be [L, d] or [B, L, d], got {:?}", u.shape()))),
    };
    if len == 0 {
        return Err(Error::Shape("scan over an empty sequence".into()));
    }
    let n = match *a_log.shape() {
        [dd, n] if dd == d && n > 0 => n,
        _ => return Err(Error::Shape(format!("a_log {:?} for {d} channels", a_log.shape()))),
    };
    let mut bc_shape = u.shape().to_vec();
    *bc_shape.last_mut().unwrap() = n;
    let ok = delta.shape() == u.shape() && b.shape() == bc_shape && c.shape() == bc_shape && d_skip.shape() == [d];
    if !ok {
        return Err(Error::Shape(format!(
            "scan operands u {:?} delta {:?} b {:?} c {:?} d {:?}",
            u.shape(),
            delta.shape(),
            b.shape(),
            c.shape(),
            d_skip.shape()
        )));
    }
    Ok(ScanDims { batch, len, d, n })
}

/// Naive per-step recurrence over a materialised [`DiscreteSsm`]. Not
/// differentiable; used as the oracle for [`selective_scan`].
pub fn selective_scan_reference(
    u: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let ScanDims { batch, len, d, n } = scan_dims(u, delta, a_log, b, c, d_skip)?;
    let a_diag: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
    let mut y = Vec::with_capacity(batch * len * d);
    for bi in 0..batch {
        let seq = |t: &Tensor, w: usize| t.data()[bi * len * w..(bi + 1) * len * w].to_vec();
        let (x, bs, cs, dt) = (seq(u, d), seq(b, n), seq(c, n), seq(delta, d));
        let disc = discretize_zoh(&a_diag, n, &bs, &dt, &x)?;
        for ch in 0..d {
            let mut h = vec![0.0; n];
            let mut out = Vec::with_capacity(len);
            for t in 0..len {
                let mut yt = 0.0;
                for k in 0..n {
                    let o = (t * d + ch) * n + k;
                    h[k] = disc.a_bar[o] * h[k] + disc.b_bar_x[o];
                    yt += cs[t * n + k] * h[k];
                }
                out.push(yt + d_skip.data()[ch] * x[t * d + ch]);
            }
            y.push(out);
        }
    }
    // y holds per-(batch, channel) rows; transpose back to [B, L, d]
    let mut flat = vec![0.0; batch * len * d];
    for bi in 0..batch {
        for ch in 0..d {
            for t in 0..len {
                flat[(bi * len + t) * d + ch] = y[bi * d + ch][t];
            }
        }
    }
    Ok(Tensor::new(flat, u.shape())?)
}

/// Differentiable selective scan with a hand-written adjoint.
///
/// `u`, `delta`: `[B, L, d]`; `a_log`: `[d, N]`; `b`, `c`: `[B, L, N]`;
/// `d_skip`: `[d]`. Returns `y` shaped like `u`.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let dims = scan_dims(u, delta, a_log, b, c, d_skip)?;
    let ScanDims { batch, len, d, n } = dims;
    let parents = vec![u.clone(), delta.clone(), a_log.clone(), b.clone(), c.clone(), d_skip.clone()];
    let need_grad = parents.iter().any(|p| p.requires_grad());
    let inp = ScanInputs {
        a: Arc::new(a_log.data().iter().map(|v| -v.exp()).collect()),
        u: u.data_arc(),
        dt: delta.data_arc(),
        b: b.data_arc(),
        c: c.data_arc(),
        d: d_skip.data_arc(),
    };
    let mut y = vec![0.0; batch * len * d];
    for bi in 0..batch {
        inp.sequence(dims, bi, &mut y, None);
    }
    if !need_grad {
        return Ok(Tensor::new(y, u.shape())?);
    }

    Ok(Tensor::from_op(y, u.shape().to_vec(), parents, move |g| {
        let ScanInputs { a, u: ud, dt: dtd, b: bd, c: cd, d: dd } = &inp;
        let mut gu = vec![0.0; batch * len * d];
        let mut gdt = vec![0.0; batch * len * d];
        let mut ga = vec![0.0; d * n];
        let mut gb = vec![0.0; batch * len * n];
        let mut gc = vec![0.0; batch * len * n];
        let mut gd = vec![0.0; d];
        let mut gh = vec![0.0; d * n];
        // states are recomputed one sequence at a time rather than kept
        let mut hs = vec![0.0; len * d * n];
        let mut scratch = vec![0.0; batch * len * d];
        for bi in 0..batch {
            inp.sequence(dims, bi, &mut scratch, Some(&mut hs));
            gh.fill(0.0);
            for t in (0..len).rev() {
                let row = bi * len + t;
                for ch in 0..d {
                    let gy = g[row * d + ch];
                    let x = ud[row * d + ch];
                    let dt = dtd[row * d + ch];
                    gd[ch] += gy * x;
                    let mut gu_acc = gy * dd[ch];
                    let mut gdt_acc = 0.0;
                    for k in 0..n {
                        let idx = (t * d + ch) * n + k;
                        let h_prev = if t > 0 { hs[idx - d * n] } else { 0.0 };
                        let bk = bd[row * n + k];
                        gc[row * n + k] += gy * hs[idx];
                        let ghn = gh[ch * n + k] + gy * cd[row * n + k];
                        let [ab, beta, dab_dd, dbeta_dd, dab_da, dbeta_da] = zoh_partials(a[ch * n + k], dt);
                        let g_ab = ghn * h_prev;
                        let g_beta = ghn * bk * x;
                        gb[row * n + k] += ghn * beta * x;
                        gu_acc += ghn * beta * bk;
                        gdt_acc += g_ab * dab_dd + g_beta * dbeta_dd;
                        ga[ch * n + k] += g_ab * dab_da + g_beta * dbeta_da;
                        gh[ch * n + k] = ghn * ab;
                    }
                    gu[row * d + ch] = gu_acc;
                    gdt[row * d + ch] = gdt_acc;
                }
            }
        }
        // a = -exp(a_log) so da/da_log = a
        let g_alog: Vec<f64> = ga.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
        vec![Some(gu), Some(gdt), Some(g_alog), Some(gb), Some(gc), Some(gd)]
    }))
}

struct ScanInputs {
    a: Arc<Vec<f64>>,
    u: Arc<Vec<f64>>,
    dt: Arc<Vec<f64>>,
    b: Arc<Vec<f64>>,
    c: Arc<Vec<f64>>,
    d: Arc<Vec<f64>>,
}

impl ScanInputs {
    /// Runs sequence `bi`, writing its outputs into `y` and, if given, the
    /// state after each step into `hs` (`[len, d, n]`).
    fn sequence(&self, dims: ScanDims, bi: usize, y: &mut [f64], mut hs: Option<&mut [f64]>) {
        let ScanDims { len, d, n, .. } = dims;
        let mut h = vec![0.0; d * n];
        for t in 0..len {
            let row = bi * len + t;
            let (bt, ct) = (&self.b[row * n..(row + 1) * n], &self.c[row * n..(row + 1) * n]);
            for ch in 0..d {
                let x = self.u[row * d + ch];
                let dt = self.dt[row * d + ch];
                let hc = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    let (ab, beta) = zoh_coefficients(self.a[ch * n + k], dt);
                    hc[k] = ab * hc[k] + beta * bt[k] * x;
                    acc += ct[k] * hc[k];
                }
                y[row * d + ch] = acc + self.d[ch] * x;
                if let Some(hs) = hs.as_deref_mut() {
                    hs[(t * d + ch) * n..(t * d + ch + 1) * n].copy_from_slice(hc);
                }
            }
        }
    }
}

/// Per-position selection parameters.
#[derive(Debug, Clone)]
pub struct Selection {
    pub delta: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

/// Learned state-space parameters for one scan branch over `d_inner`
/// channels: decay, skip, and the projections that produce `B`, `C`, `Δ`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    d_inner: usize,
    n_state: usize,
    rank: usize,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: crate::params::ParamId,
    d_skip: crate::params::ParamId,
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl SsmParams {
    pub fn dt_rank(d_inner: usize) -> usize {
        d_inner.div_ceil(16)
    }

    pub fn new(init: &mut Init, name: &str, d_inner: usize, n_state: usize) -> Self {
        let mut p = init.sub(name);
        let rank = Self::dt_rank(d_inner);
        let x_proj = Linear::new(&mut p, "x_proj", d_inner, rank + 2 * n_state, false, 1.0);
        let w = p.he("dt_proj.weight", &[d_inner, rank], rank, 1.0);
        let (lo, hi) = (DT_MIN.ln(), DT_MAX.ln());
        let bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = p.rng().uniform(lo, hi).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let b = p.add("dt_proj.bias", &[d_inner], bias);
        let a_log = (0..d_inner * n_state).map(|i| ((i % n_state) as f64 + 1.0).ln()).collect();
        let a_log = p.add("a_log", &[d_inner, n_state], a_log);
        let d_skip = p.constant("d_skip", &[d_inner], 1.0);
        Self {
            d_inner,
            n_state,
            rank,
            x_proj,
            dt_proj: Linear::from_ids(w, Some(b)),
            a_log,
            d_skip,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_inner
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn param_count(d_inner: usize, n_state: usize) -> usize {
        let r = Self::dt_rank(d_inner);
        d_inner * (r + 2 * n_state) + r * d_inner + d_inner + d_inner * n_state + d_inner
    }

    /// `x: [B, L, d] -> (Δ [B, L, d], B [B, L, N], C [B, L, N])`.
    pub fn project_selection(&self, s: &Session, x: &Tensor) -> Result<Selection> {
        let proj = self.x_proj.forward(s, x)?;
        let axis = proj.rank() - 1;
        let raw = proj.narrow(axis, 0, self.rank)?;
        let b = proj.narrow(axis, self.rank, self.n_state)?;
        let c = proj.narrow(axis, self.rank + self.n_state, self.n_state)?;
        let delta = self.dt_proj.forward(s, &raw)?.softplus();
        Ok(Selection { delta, b, c })
    }

    pub fn forward(&self, s: &Session, x: &Tensor) -> Result<Tensor> {
        let sel = self.project_selection(s, x)?;
        selective_scan(x, &sel.delta, &s.p(self.a_log), &sel.b, &sel.c, &s.p(self.d_skip))
    }
}

/// Inputs of one scan call, for oracle comparisons.
#[derive(Debug, Clone)]
pub struct ScanInstance {
    pub u: Tensor,
    pub delta: Tensor,
    pub a_log: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub d_skip: Tensor,
}

impl ScanInstance {
    /// `L <= 64`, `d <= 8`, `N <= 8`, batch 1 or 2.
    pub fn random(rng: &mut SplitMix64) -> Self {
        let l = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let batch = 1 + rng.below(2);
        let mut r = |shape: &[usize], lo: f64, hi: f64| Tensor::rand_uniform(shape, lo, hi, rng);
        Self {
            u: r(&[batch, l, d], -2.0, 2.0),
            delta: r(&[batch, l, d], 1e-3, 1.0),
            a_log: r(&[d, n], -1.0, 2.0),
            b: r(&[batch, l, n], -2.0, 2.0),
            c: r(&[batch, l, n], -2.0, 2.0),
            d_skip: r(&[d], -1.0, 1.0),
        }
    }

    pub fn fused(&self) -> Result<Tensor> {
        selective_scan(&self.u, &self.delta, &self.a_log, &self.b, &self.c, &self.d_skip)
    }

    pub fn reference(&self) -> Result<Tensor> {
        selective_scan_reference(&self.u, &self.delta, &self.a_log, &self.b, &self.c, &self.d_skip)
    }

    /// Max absolute difference between the fused scan and the recurrence.
    pub fn deviation(&self) -> Result<f64> {
        Ok(self.fused()?.max_abs_diff(&self.reference()?)?)
    }
}

/// One channel, one state, constant input and selection:
/// `y_t = c b beta (1 - abar^(t+1)) / (1 - abar)`. Returns the max error.
pub fn geometric_series_deviation(a_cont: f64, delta: f64, len: usize) -> Result<f64> {
    let u = Tensor::ones(&[len, 1]);
    let dt = Tensor::full(&[len, 1], delta);
    let a_log = Tensor::new(vec![(-a_cont).ln()], &[1, 1])?;
    let (bv, cv) = (0.7, 1.3);
    let y = selective_scan(&u, &dt, &a_log, &Tensor::full(&[len, 1], bv), &Tensor::full(&[len, 1], cv), &Tensor::zeros(&[1]))?;
    let abar = (a_cont * delta).exp();
    let beta = (a_cont * delta).exp_m1() / a_cont;
    Ok((0..len)
        .map(|t| {
            let want = cv * bv * beta * (1.0 - abar.powi(t as i32 + 1)) / (1.0 - abar);
            (y.data()[t] - want).abs()
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use pmsr_tensor::SplitMix64;

    fn t(v: Vec<f64>, s: &[usize]) -> Tensor {
        Tensor::new(v, s).unwrap()
    }

    #[test]
    fn zoh_closed_forms() {
        let (ab, beta) = zoh_coefficients(-1.0, 2f64.ln());
        assert!((ab - 0.5).abs() < 1e-15);
        assert!((beta - 0.5).abs() < 1e-15);
        assert_eq!(zoh_coefficients(-3.0, 0.0), (1.0, 0.0));
        let (_, beta) = zoh_coefficients(-1e-12, 0.3);
        assert!((beta - 0.3).abs() < 1e-12);
        let (_, beta) = zoh_coefficients(0.0, 0.7);
        assert_eq!(beta, 0.7);
    }

    #[test]
    fn zoh_partials_match_differences() {
        for &(a, dt) in &[(-1.0, 0.3), (-7.0, 0.01), (-0.002, 0.2), (-1e-9, 0.5)] {
            let [_, _, dab_dd, dbeta_dd, dab_da, dbeta_da] = zoh_partials(a, dt);
            let h = 1e-6;
            let f = |a, dt| zoh_coefficients(a, dt);
            let num = |i: usize, da: f64, dd: f64| {
                let p = f(a + da, dt + dd);
                let m = f(a - da, dt - dd);
                let (p, m) = if i == 0 { (p.0, m.0) } else { (p.1, m.1) };
                (p - m) / (2.0 * h)
            };
            assert!((num(0, 0.0, h) - dab_dd).abs() < 1e-7);
            assert!((num(1, 0.0, h) - dbeta_dd).abs() < 1e-7);
            assert!((num(0, h, 0.0) - dab_da).abs() < 1e-7);
            assert!((num(1, h, 0.0) - dbeta_da).abs() < 1e-7, "{a} {dt}");
        }
    }

    #[test]
    fn single_step_and_zero_input() {
        let u = t(vec![2.0], &[1, 1]);
        let dt = t(vec![2f64.ln()], &[1, 1]);
        let a_log = t(vec![0.0], &[1, 1]);
        let b = t(vec![3.0], &[1, 1]);
        let c = t(vec![5.0], &[1, 1]);
        let d = t(vec![0.25], &[1]);
        let y = selective_scan(&u, &dt, &a_log, &b, &c, &d).unwrap();
        // C * (0.5 * B * x) + D x
        assert!((y.data()[0] - (5.0 * 0.5 * 3.0 * 2.0 + 0.5)).abs() < 1e-14);
        let z = Tensor::zeros(&[5, 1]);
        let y0 = selective_scan_reference(&z, &Tensor::full(&[5, 1], 0.1), &a_log, &t(vec![1.0; 5], &[5, 1]), &t(vec![1.0; 5], &[5, 1]), &d).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memoryless_when_decay_saturates() {
        let mut rng = SplitMix64::new(4);
        let (l, n) = (6, 3);
        let u = Tensor::rand_uniform(&[l, 1], -1.0, 1.0, &mut rng);
        let dt = Tensor::rand_uniform(&[l, 1], 0.1, 0.5, &mut rng);
        let a_log = Tensor::full(&[1, n], 30.0);
        let b = Tensor::rand_uniform(&[l, n], -1.0, 1.0, &mut rng);
        let c = Tensor::rand_uniform(&[l, n], -1.0, 1.0, &mut rng);
        let d = t(vec![0.7], &[1]);
        let y = selective_scan(&u, &dt, &a_log, &b, &c, &d).unwrap();
        let a = -(30f64.exp());
        for k in 0..l {
            let (_, beta) = zoh_coefficients(a, dt.data()[k]);
            let x = u.data()[k];
            let expect: f64 = (0..n).map(|j| c.data()[k * n + j] * beta * b.data()[k * n + j] * x).sum::<f64>() + 0.7 * x;
            assert!((y.data()[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn batched_equals_per_sequence() {
        let mut rng = SplitMix64::new(9);
        let (bs, l, d, n) = (3, 7, 2, 3);
        let u = Tensor::rand_uniform(&[bs, l, d], -1.0, 1.0, &mut rng);
        let dt = Tensor::rand_uniform(&[bs, l, d], 0.01, 0.5, &mut rng);
        let a_log = Tensor::rand_uniform(&[d, n], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[bs, l, n], -1.0, 1.0, &mut rng);
        let c = Tensor::rand_uniform(&[bs, l, n], -1.0, 1.0, &mut rng);
        let dk = Tensor::rand_uniform(&[d], -1.0, 1.0, &mut rng);
        let y = selective_scan(&u, &dt, &a_log, &b, &c, &dk).unwrap();
        for bi in 0..bs {
            let pick = |x: &Tensor, w: usize| t(x.data()[bi * l * w..(bi + 1) * l * w].to_vec(), &[l, w]);
            let yi = selective_scan(&pick(&u, d), &pick(&dt, d), &a_log, &pick(&b, n), &pick(&c, n), &dk).unwrap();
            assert_eq!(yi.data(), &y.data()[bi * l * d..(bi + 1) * l * d]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let u = Tensor::zeros(&[4, 2]);
        let ok = Tensor::zeros(&[4, 3]);
        let a = Tensor::zeros(&[2, 3]);
        let d = Tensor::zeros(&[2]);
        assert!(selective_scan(&u, &u, &a, &ok, &ok, &d).is_ok());
        assert!(selective_scan(&u, &u, &Tensor::zeros(&[3, 3]), &ok, &ok, &d).is_err());
        assert!(selective_scan(&u, &u, &a, &u, &ok, &d).is_err());
        let empty = Tensor::zeros(&[0, 2]);
        assert!(selective_scan(&empty, &empty, &a, &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3]), &d).is_err());
    }

    #[test]
    fn selection_shapes_and_delta_bias() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let ssm = SsmParams::new(&mut Init::new(&mut store, &mut rng), "ssm", 48, 8);
        assert_eq!(store.total(), SsmParams::param_count(48, 8));
        let s = Session::inference(&store);
        let sel = ssm.project_selection(&s, &Tensor::zeros(&[1, 16, 48])).unwrap();
        assert_eq!(sel.delta.shape(), &[1, 16, 48]);
        assert_eq!(sel.b.shape(), &[1, 16, 8]);
        assert_eq!(sel.c.shape(), &[1, 16, 8]);
        let bias = store.values(store.find("ssm.dt_proj.bias").unwrap());
        for (t, &bv) in bias.iter().enumerate() {
            let dt = pmsr_tensor::scalar::softplus(bv);
            assert!((DT_MIN * 0.999..=DT_MAX * 1.001).contains(&dt));
            // zero input: delta is softplus(bias) at every position
            assert!((sel.delta.data()[15 * 48 + t] - dt).abs() < 1e-15);
        }
    }
}
