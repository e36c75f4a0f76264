//! Central finite-difference oracle for checking backward rules.
//!
//! Only forward evaluations are used to build the numeric side, so the
//! check is independent of every backward implementation it validates.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per input (all coordinates when the input is smaller).
    pub coords_per_input: usize,
    /// Random directional-derivative probes per input.
    pub directions: usize,
    /// Denominator floor of the relative error, so entries whose true
    /// derivative is ~0 are compared absolutely at this scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_input: 24,
            directions: 2,
            floor: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input index, coordinate or `usize::MAX` for a direction, analytic, numeric)
    pub worst: (usize, usize, f64, f64),
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights, so the
/// loss is sensitive to every output element without symmetric cancellation.
pub fn probe_loss(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = SplitMix64::new(seed);
    let w = Tensor::from_fn(out.shape(), |_| rng.uniform(-1.0, 1.0));
    Ok(out.mul(&w)?.sum())
}

/// Compares analytic gradients of `f` at `inputs` against central differences.
/// `f` must return a single-element tensor.
pub fn check<F>(inputs: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().with_grad()).collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |k: usize, dir: &[f64], h: f64| -> Result<f64> {
        let moved: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == k {
                    let v: Vec<f64> = t.data().iter().zip(dir).map(|(x, d)| x + h * d).collect();
                    Tensor::new(v, t.shape())
                } else {
                    Ok(t.detach())
                }
            })
            .collect::<Result<_>>()?;
        f(&moved)?.item()
    };

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let h = opts.step;
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_input {
            (0..n).collect()
        } else {
            (0..opts.coords_per_input).map(|_| rng.below(n)).collect()
        };
        let mut dir = vec![0.0; n];
        for c in coords {
            dir[c] = 1.0;
            let num = (eval(k, &dir, h)? - eval(k, &dir, -h)?) / (2.0 * h);
            dir[c] = 0.0;
            let e = rel_err(analytic[k][c], num, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (k, c, analytic[k][c], num);
            }
        }
        for _ in 0..opts.directions {
            let dir: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let num = (eval(k, &dir, h)? - eval(k, &dir, -h)?) / (2.0 * h);
            let ana: f64 = analytic[k].iter().zip(&dir).map(|(a, d)| a * d).sum();
            let e = rel_err(ana, num, opts.floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (k, usize::MAX, ana, num);
            }
        }
    }
    Ok(report)
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
}

fn cases() -> Vec<Case> {
    use crate::Conv2dSpec;
    let a = rand(&[2, 3, 4], 1);
    let b = rand(&[3, 1], 2);
    let pos = rand(&[3, 1], 3).add_scalar(2.5);
    let x4 = rand(&[2, 3, 4, 5], 5);
    let xc = rand(&[2, 4, 6, 5], 11);
    let xn = rand(&[2, 5, 3, 2], 18);
    let xl = rand(&[2, 4, 6, 4], 23);
    let idx = std::sync::Arc::new(vec![0usize, 5, 5, 7, 1]);
    let mut c: Vec<Case> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|x| x[0].add(&x[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|x| x[0].sub(&x[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|x| x[0].mul(&x[1]))),
        ("div", vec![a.clone(), pos], Box::new(|x| x[0].div(&x[1]))),
        ("scale", vec![a.clone()], Box::new(|x| Ok(x[0].scale(-1.7)))),
        ("add_scalar", vec![a.clone()], Box::new(|x| Ok(x[0].add_scalar(0.3)))),
        ("exp", vec![a.clone()], Box::new(|x| Ok(x[0].exp()))),
        ("sigmoid", vec![a.scale(4.0)], Box::new(|x| Ok(x[0].sigmoid()))),
        ("softplus", vec![a.scale(4.0)], Box::new(|x| Ok(x[0].softplus()))),
        ("gelu", vec![a.scale(3.0)], Box::new(|x| Ok(x[0].gelu()))),
        ("square", vec![a.clone()], Box::new(|x| Ok(x[0].square()))),
        // kinks at 0 are measure-zero for random inputs
        ("relu", vec![a.clone()], Box::new(|x| Ok(x[0].relu()))),
        ("abs", vec![a.clone()], Box::new(|x| Ok(x[0].abs()))),
        ("sum", vec![a.clone()], Box::new(|x| Ok(x[0].sum()))),
        ("mean", vec![a.clone()], Box::new(|x| Ok(x[0].mean()))),
        ("sum_axis", vec![a.clone()], Box::new(|x| x[0].sum_axis(1, false))),
        ("mean_axis", vec![a.clone()], Box::new(|x| x[0].mean_axis(2, true))),
        ("global_avg_pool", vec![x4], Box::new(|x| x[0].global_avg_pool())),
        ("matmul", vec![a.clone(), rand(&[4, 5], 7)], Box::new(|x| x[0].matmul(&x[1]))),
        ("bmm", vec![a.clone(), rand(&[2, 4, 2], 8)], Box::new(|x| x[0].matmul(&x[1]))),
        ("transpose_last", vec![a.clone()], Box::new(|x| x[0].transpose_last())),
        (
            "linear",
            vec![a.clone(), rand(&[6, 4], 9), rand(&[6], 10)],
            Box::new(|x| x[0].linear(&x[1], Some(&x[2]))),
        ),
        ("linear_nobias", vec![a.clone(), rand(&[6, 4], 9)], Box::new(|x| x[0].linear(&x[1], None))),
        (
            "conv3x3",
            vec![xc.clone(), rand(&[3, 4, 3, 3], 12), rand(&[3], 13)],
            Box::new(|t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::same(3))),
        ),
        (
            "conv1x1",
            vec![xc.clone(), rand(&[3, 4, 1, 1], 14), rand(&[3], 13)],
            Box::new(|t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::default())),
        ),
        (
            "depthwise5",
            vec![xc.clone(), rand(&[4, 1, 5, 5], 15), rand(&[4], 16)],
            Box::new(|t| t[0].conv2d(&t[1], Some(&t[2]), Conv2dSpec::depthwise(5, 4))),
        ),
        (
            "grouped_strided",
            vec![xc, rand(&[4, 2, 3, 3], 17)],
            Box::new(|t| t[0].conv2d(&t[1], None, Conv2dSpec { stride: 2, padding: 1, groups: 2 })),
        ),
        (
            "layer_norm_c",
            vec![xn.clone(), rand(&[5], 19).add_scalar(1.0), rand(&[5], 20)],
            Box::new(|t| t[0].layer_norm(&t[1], &t[2], 1, 1e-5)),
        ),
        (
            "layer_norm_last",
            vec![xn.clone(), rand(&[2], 21), rand(&[2], 22)],
            Box::new(|t| t[0].layer_norm(&t[1], &t[2], 3, 1e-5)),
        ),
        ("softmax", vec![xn.scale(3.0)], Box::new(|t| t[0].softmax_last())),
        (
            "attention",
            vec![rand(&[2, 2, 6, 3], 40), rand(&[2, 2, 6, 3], 41), rand(&[2, 2, 6, 3], 42), rand(&[2, 6, 6], 43)],
            Box::new(|t| Ok(t[0].attention(&t[1], &t[2], Some(&t[3]), 0.7)?.0)),
        ),
        (
            "attention_unbiased",
            vec![rand(&[3, 5, 4], 44), rand(&[3, 5, 4], 45), rand(&[3, 5, 4], 46)],
            Box::new(|t| Ok(t[0].attention(&t[1], &t[2], None, 1.3)?.0)),
        ),
        ("reshape", vec![xl.clone()], Box::new(|t| t[0].reshape(&[8, 24]))),
        ("permute", vec![xl.clone()], Box::new(|t| t[0].permute(&[0, 2, 3, 1]))),
        ("narrow", vec![xl.clone()], Box::new(|t| t[0].narrow(2, 1, 3))),
        (
            "split_concat",
            vec![xl.clone()],
            Box::new(|t| {
                let p = t[0].split(1, 2)?;
                Tensor::concat(&[p[1].clone(), p[0].scale(2.0)], 1)
            }),
        ),
        ("pad_reflect", vec![xl.clone()], Box::new(|t| t[0].pad_reflect(5, 3))),
        ("crop", vec![xl.clone()], Box::new(|t| t[0].crop(4, 3))),
        ("avg_pool2", vec![xl.clone()], Box::new(|t| t[0].avg_pool2())),
        ("bilinear_up2", vec![xl.clone()], Box::new(|t| t[0].bilinear_up2())),
        ("pixel_shuffle", vec![xl.clone()], Box::new(|t| t[0].pixel_shuffle(2))),
        ("gather_repeated", vec![xl.clone()], Box::new(move |t| t[0].gather(idx.clone(), &[5]))),
    ];
    c.push((
        "composite",
        vec![rand(&[2, 4, 4, 4], 24), rand(&[4, 4, 3, 3], 25)],
        Box::new(|t| {
            let y = t[0].conv2d(&t[1], None, Conv2dSpec::same(3))?;
            let gate = y.sigmoid();
            let hf = t[0].sub(&t[0].avg_pool2()?.bilinear_up2()?)?;
            y.mul(&gate)?.add(&hf)?.add(&t[0].square())
        }),
    ));
    c
}

/// Runs the finite-difference check on every differentiable operator, each
/// reduced through [`probe_loss`].
pub fn operator_suite(opts: GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases()
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check(&inputs, |xs| probe_loss(&f(xs)?, 99), opts)?)))
        .collect()
}
