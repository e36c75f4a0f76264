#![allow(dead_code)]

use pmsr_core::attention::{WindowAttention, WindowAttentionConfig};
use pmsr_core::blocks::{Group, GroupSpec, ScanModule, ScanVariant, StageOrder};
use pmsr_core::freq::{Ahfrm, HfcaSource, Msgm};
use pmsr_core::layouts::{build_cardinal_layout, build_window_layout, direction_schedule, Axis, Direction, ScanLayout};
use pmsr_core::model::{ModelConfig, TpmSr};
use pmsr_core::params::{Init, ParamStore, Session};
use pmsr_core::ssm::{selective_scan, SsmParams};
use pmsr_core::Result;
use pmsr_tensor::gradcheck::{check, probe_loss, rel_err, GradCheckOptions};
use pmsr_tensor::{SplitMix64, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
// finite differences of an O(10) loss carry ~1e-10 of rounding noise
const FLOOR: f64 = 1e-5;

pub fn rand(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut SplitMix64::new(seed))
}

/// Max relative error of parameter gradients: a few coordinates of every
/// parameter tensor plus one random direction over all of them.
pub fn param_check(store: &mut ParamStore, f: &dyn Fn(&Session) -> Result<Tensor>, seed: u64) -> Result<f64> {
    let grads = {
        let s = Session::training(store);
        probe_loss(&f(&s)?, 77)?.backward()?;
        s.grads()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let s = Session::inference(store);
        Ok(probe_loss(&f(&s)?, 77)?.item()?)
    };
    let ids: Vec<_> = store.ids().collect();
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for (i, &id) in ids.iter().enumerate() {
        let n = store.values(id).len();
        let analytic = grads[i].clone().unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..2.min(n) {
            let c = rng.below(n);
            let orig = store.values(id)[c];
            store.values_mut(id)[c] = orig + FD_STEP;
            let up = eval(store)?;
            store.values_mut(id)[c] = orig - FD_STEP;
            let down = eval(store)?;
            store.values_mut(id)[c] = orig;
            worst = worst.max(rel_err(analytic[c], (up - down) / (2.0 * FD_STEP), FLOOR));
        }
    }
    // one joint direction
    let dirs: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| (0..store.values(id).len()).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let orig: Vec<Vec<f64>> = ids.iter().map(|&id| store.values(id).to_vec()).collect();
    let shifted = |sign: f64, store: &mut ParamStore| -> Result<f64> {
        for (k, &id) in ids.iter().enumerate() {
            let v = store.values_mut(id);
            for (j, x) in v.iter_mut().enumerate() {
                *x = orig[k][j] + sign * FD_STEP * dirs[k][j];
            }
        }
        eval(store)
    };
    let up = shifted(1.0, store)?;
    let down = shifted(-1.0, store)?;
    for (k, &id) in ids.iter().enumerate() {
        store.values_mut(id).clone_from(&orig[k]);
    }
    let analytic: f64 = (0..ids.len())
        .filter_map(|k| grads[k].as_ref().map(|g| g.iter().zip(&dirs[k]).map(|(a, d)| a * d).sum::<f64>()))
        .sum();
    worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP), FLOOR));
    Ok(worst)
}

/// Max relative error of the gradient with respect to the block input.
pub fn input_check(store: &ParamStore, x: &Tensor, f: &dyn Fn(&Session, &Tensor) -> Result<Tensor>) -> Result<f64> {
    let opts = GradCheckOptions {
        step: FD_STEP,
        floor: FLOOR,
        ..GradCheckOptions::default()
    };
    let r = check(
        std::slice::from_ref(x),
        |xs| {
            let s = Session::inference(store);
            let out = f(&s, &xs[0]).map_err(to_tensor_err)?;
            probe_loss(&out, 77)
        },
        opts,
    )?;
    Ok(r.max_rel_err)
}

fn both(store: &mut ParamStore, x: &Tensor, f: &dyn Fn(&Session, &Tensor) -> Result<Tensor>) -> Result<f64> {
    let a = input_check(store, x, f)?;
    let xc = x.clone();
    let b = param_check(store, &|s| f(s, &xc), 5)?;
    Ok(a.max(b))
}

fn spec(c: usize, order: StageOrder, source: HfcaSource, use_hfm: bool) -> GroupSpec {
    GroupSpec {
        width: c,
        blocks: 1,
        window_attn: 4,
        heads: 2,
        windows: (4, 8),
        n_state: 4,
        ffn_ratio: 1,
        stage_order: order,
        wsml_scan: ScanVariant::Mwss,
        gsml_scan: ScanVariant::Mgss,
        hfca_source: source,
        use_hfm,
    }
}

pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        groups: 1,
        blocks_per_group: 1,
        width: 8,
        scale: 2,
        window_attn: 4,
        wif: 4,
        wff: 8,
        n_state: 4,
        heads: 2,
        ..ModelConfig::default()
    }
}

/// Gradient checks of the scan, every block and the whole network, on
/// shapes no larger than `[2, 8, 16, 16]`.
pub fn block_suite() -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();

    let (b, l, d, n) = (2, 12, 4, 3);
    let scan_inputs = [
        rand(&[b, l, d], 1, -1.0, 1.0),
        rand(&[b, l, d], 2, 0.05, 0.5),
        rand(&[d, n], 3, -0.5, 1.0),
        rand(&[b, l, n], 4, -1.0, 1.0),
        rand(&[b, l, n], 5, -1.0, 1.0),
        rand(&[d], 6, -1.0, 1.0),
    ];
    let opts = GradCheckOptions {
        step: FD_STEP,
        ..GradCheckOptions::default()
    };
    let r = check(
        &scan_inputs,
        |t| probe_loss(&selective_scan(&t[0], &t[1], &t[2], &t[3], &t[4], &t[5]).map_err(to_tensor_err)?, 77),
        opts,
    )?;
    out.push(("selective_scan", r.max_rel_err));

    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(9);
    let ssm = SsmParams::new(&mut Init::new(&mut store, &mut rng), "ssm", 8, 4);
    out.push(("ssm_params", both(&mut store, &rand(&[2, 10, 8], 7, -1.0, 1.0), &|s, x| ssm.forward(s, x))?));

    let x8 = rand(&[2, 8, 8, 8], 8, -1.0, 1.0);
    let mut store = ParamStore::new();
    let attn = WindowAttention::new(
        &mut Init::new(&mut store, &mut rng),
        "attn",
        WindowAttentionConfig {
            window: 4,
            heads: 2,
            dim: 8,
        },
    )?;
    out.push(("window_attention", both(&mut store, &x8, &|s, x| attn.forward(s, x))?));

    for (name, variant) in [("mwss_module", ScanVariant::Mwss), ("mgss_module", ScanVariant::Mgss), ("ss2d_module", ScanVariant::Ss2d)] {
        let mut store = ParamStore::new();
        let m = ScanModule::new(&mut Init::new(&mut store, &mut rng), "scan", variant, 8, 4, (4, 8))?;
        let x = rand(&[1, 8, 8, 8], 10, -1.0, 1.0);
        out.push((name, both(&mut store, &x, &|s, x| m.forward(s, x, 1))?));
    }

    let mut store = ParamStore::new();
    let msgm = Msgm::new(&mut Init::new(&mut store, &mut rng), "msgm", 8);
    out.push(("msgm", both(&mut store, &x8, &|s, x| msgm.forward(s, x))?));

    for (name, source, use_hfm) in [
        ("ahfrm", HfcaSource::Eq9Xlf, true),
        ("ahfrm_prose_deg", HfcaSource::ProseDeg, true),
        ("ahfrm_no_hfm", HfcaSource::Eq9Xlf, false),
    ] {
        let mut store = ParamStore::new();
        let m = Ahfrm::new(&mut Init::new(&mut store, &mut rng), "ahfrm", 8, source, use_hfm);
        // zero biases put the channel map's ReLU exactly on its kink when its input pools to zero
        let biases: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("bias")).collect();
        for id in biases {
            store.values_mut(id).iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        let other = rand(&[2, 8, 8, 8], 11, -1.0, 1.0);
        out.push((name, both(&mut store, &x8, &|s, x| m.forward(s, &other, x))?));
    }

    for (name, order) in [
        ("group_lrg", StageOrder::LocalRegionalGlobal),
        ("group_glr", StageOrder::GlobalLocalRegional),
        ("group_rlg", StageOrder::RegionalLocalGlobal),
    ] {
        let mut store = ParamStore::new();
        let g = Group::new(&mut Init::new(&mut store, &mut rng), "group0", &spec(8, order, HfcaSource::Eq9Xlf, true), 0)?;
        let x = rand(&[1, 8, 16, 16], 12, -1.0, 1.0);
        out.push((name, both(&mut store, &x, &|s, x| g.forward(s, x))?));
    }

    let mut model = TpmSr::new(&micro_model_config(), 3)?;
    let x = rand(&[1, 3, 16, 16], 13, 0.0, 1.0);
    let ia = {
        let m = &model;
        input_check(m.params(), &x, &|s, x| m.forward(s, x))?
    };
    // the closure only needs the module structure; values come from the session
    let structure = model.clone();
    let pa = param_check(model.params_mut(), &|s| structure.forward(s, &x), 5)?;
    out.push(("model", ia.max(pa)));
    Ok(out)
}

fn to_tensor_err(e: pmsr_core::Error) -> pmsr_tensor::TensorError {
    pmsr_tensor::TensorError::Invalid {
        op: "block",
        msg: e.to_string(),
    }
}

pub fn check_bijection(l: &ScanLayout) -> std::result::Result<(), String> {
    let n = l.h * l.w;
    if l.forward.len() != n || l.inverse.len() != n {
        return Err("length".into());
    }
    let mut seen = vec![false; n];
    for &g in &l.forward {
        if g >= n || seen[g] {
            return Err(format!("not a permutation at {g}"));
        }
        seen[g] = true;
    }
    if (0..n).any(|i| l.inverse[l.forward[i]] != i) {
        return Err("inverse".into());
    }
    Ok(())
}

/// Each run of `window^2` sequence positions is exactly one window.
pub fn check_contiguity(l: &ScanLayout, window: usize) -> std::result::Result<(), String> {
    for chunk in l.forward.chunks(window * window) {
        let (r0, c0) = (chunk[0] / l.w / window, chunk[0] % l.w / window);
        if chunk.iter().any(|&g| (g / l.w / window, g % l.w / window) != (r0, c0)) {
            return Err(format!("chunk starting at {} spans windows", chunk[0]));
        }
    }
    Ok(())
}

/// Inside a window, consecutive tokens move one step along the scan axis
/// except where the inner raster wraps.
pub fn check_neighbours(l: &ScanLayout, window: usize, axis: Axis) -> std::result::Result<(), String> {
    for chunk in l.forward.chunks(window * window) {
        for (k, pair) in chunk.windows(2).enumerate() {
            if (k + 1) % window == 0 {
                continue;
            }
            let (r0, c0) = ((pair[0] / l.w) as isize, (pair[0] % l.w) as isize);
            let (r1, c1) = ((pair[1] / l.w) as isize, (pair[1] % l.w) as isize);
            let (dr, dc) = ((r1 - r0).abs(), (c1 - c0).abs());
            let ok = match axis {
                Axis::Horizontal => dr == 0 && dc == 1,
                Axis::Vertical => dr == 1 && dc == 0,
            };
            if !ok {
                return Err(format!("{} -> {} not adjacent along {axis:?}", pair[0], pair[1]));
            }
        }
    }
    Ok(())
}

/// Exhaustive layout checks for every grid up to 64x64; returns the number
/// of layouts verified.
pub fn layout_sweep(max: usize) -> std::result::Result<usize, String> {
    let mut count = 0;
    for h in 1..=max {
        for w in 1..=max {
            for which in 0..4 {
                let l = build_cardinal_layout(h, w, which).map_err(|e| e.to_string())?;
                check_bijection(&l).map_err(|e| format!("cardinal {which} {h}x{w}: {e}"))?;
                count += 1;
            }
        }
    }
    for window in [2, 4, 8, 16, 32, 64] {
        for h in (window..=max).step_by(window) {
            for w in (window..=max).step_by(window) {
                for axis in [Axis::Horizontal, Axis::Vertical] {
                    for dir in [Direction::Forward, Direction::Reverse] {
                        let l = build_window_layout(h, w, window, axis, dir).map_err(|e| e.to_string())?;
                        let ctx = format!("window {window} {h}x{w} {axis:?} {dir:?}");
                        check_bijection(&l).map_err(|e| format!("{ctx}: {e}"))?;
                        check_contiguity(&l, window).map_err(|e| format!("{ctx}: {e}"))?;
                        if dir == Direction::Forward {
                            check_neighbours(&l, window, axis).map_err(|e| format!("{ctx}: {e}"))?;
                        }
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(count)
}

/// Every 4 consecutive blocks see all (axis, direction) pairs for the
/// interaction flatten, with the fusion flatten always opposite.
pub fn schedule_covers(start: usize) -> bool {
    let mut seen = std::collections::HashSet::new();
    for i in start..start + 4 {
        let (axis, wif, wff) = direction_schedule(i);
        if wif == wff {
            return false;
        }
        seen.insert((axis, wif));
    }
    seen.len() == 4
}
