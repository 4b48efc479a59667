//! Independent 64-bit reference implementations used as test oracles.
//!
//! Nothing here calls into the crate's numeric kernels: every routine is a
//! direct nested-loop transcription of the textbook definition.

#![allow(dead_code)]

use filterprune::autodiff::{Tape, Var};
use filterprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Direct cross-correlation; returns `[n, f, ho, wo]` values.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = out_extent(h, k, stride, pad);
    let wo = out_extent(w, k, stride, pad);
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((o * c + ci) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn linear_ref(x: &[f64], n: usize, d: usize, w: &[f64], k: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut acc = b.map_or(0.0, |b| b[j]);
            for t in 0..d {
                acc += x[i * d + t] * w[j * d + t];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

pub fn bn_train_ref(x: &[f64], [n, c, h, w]: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let area = h * w;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|b| (0..area).map(move |p| (b * c + ch) * area + p))
            .collect();
        let m = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in &idx {
            out[i] = (x[i] - m) / (v + eps).sqrt() * gamma[ch] + beta[ch];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bn_eval_ref(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let area = h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..area {
                let i = (b * c + ch) * area + p;
                out[i] = (x[i] - mean[ch]) / (var[ch] + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn maxpool_ref(x: &[f64], [n, c, h, w]: [usize; 4], k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = out_extent(h, k, stride, pad);
    let wo = out_extent(w, k, stride, pad);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            best = best.max(x[plane * h * w + iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

pub fn gap_ref(x: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

/// Mean negative log-likelihood, stabilized by max subtraction.
pub fn cross_entropy_ref(logits: &[f64], n: usize, m: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    total / n as f64
}

/// Central finite differences of `f` at `at` with step `h`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor on the denominator so that
/// coordinates whose true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(reference.abs()).max(GRAD_FLOOR)
}

pub const GRAD_FLOOR: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-3;

/// One differentiable op under test: how to record it on a tape and how to
/// evaluate it independently in 64-bit arithmetic.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub record: Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
    pub reference: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
}

/// Scalarizes the op output with a fixed random weighting, then compares
/// the tape's gradient for every `requires_grad` input against central
/// differences of the 64-bit reference. Returns the worst relative error.
pub fn grad_check(case: &GradCase, seed: u64) -> f64 {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = (case.record)(&mut tape, &vars);
    let weights = tensor(tape.shape(out), uniform(&mut r, tape.value(out).len(), -1.0, 1.0));
    let weighted = tape.mul_const(out, &weights).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = case.inputs.iter().map(|t| to_f64(t.data())).collect();
    let w64 = to_f64(weights.data());
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = tape.grad(vars[i]).expect("gradient recorded");
        let objective = |theta: &[f64]| {
            let mut args = base.clone();
            args[i] = theta.to_vec();
            (case.reference)(&args)
                .iter()
                .zip(&w64)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let numeric = central_differences(objective, &base[i], FD_STEP);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a as f64, *n));
        }
    }
    worst
}

/// Values spaced at least `gap` apart in random order, so max and relu
/// kinks stay out of reach of the finite-difference step.
pub fn separated(rng: &mut ChaCha8Rng, n: usize, gap: f32) -> Vec<f32> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.into_iter()
        .map(|v| (v as f32 - n as f32 / 2.0 + 0.25) * gap)
        .collect()
}

fn with_grad(t: Tensor) -> Tensor {
    t.with_requires_grad(true)
}

/// Randomized small instances of every differentiable op.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    use filterprune::autodiff::{BnStats, PoolSpec};

    let mut r = rng(seed);
    let mut cases = Vec::new();

    // conv2d
    {
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=3);
        let f = r.gen_range(1..=3);
        let k = [1usize, 3][r.gen_range(0..2)];
        let stride = r.gen_range(1..=2);
        let pad = if k == 3 { r.gen_range(0..=1) } else { 0 };
        let h = r.gen_range(k.max(3)..=6);
        let w = r.gen_range(k.max(3)..=6);
        let x = with_grad(tensor(&[n, c, h, w], uniform(&mut r, n * c * h * w, -1.0, 1.0)));
        let wt = with_grad(tensor(&[f, c, k, k], uniform(&mut r, f * c * k * k, -1.0, 1.0)));
        cases.push(GradCase {
            name: "conv2d",
            inputs: vec![x, wt],
            record: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad).unwrap()),
            reference: Box::new(move |a| conv2d_ref(&a[0], [n, c, h, w], &a[1], f, k, stride, pad)),
        });
    }

    // linear with bias
    {
        let n = r.gen_range(1..=4);
        let d = r.gen_range(1..=6);
        let k = r.gen_range(1..=4);
        let x = with_grad(tensor(&[n, d], uniform(&mut r, n * d, -1.0, 1.0)));
        let w = with_grad(tensor(&[k, d], uniform(&mut r, k * d, -1.0, 1.0)));
        let b = with_grad(tensor(&[k], uniform(&mut r, k, -1.0, 1.0)));
        cases.push(GradCase {
            name: "linear",
            inputs: vec![x, w, b],
            record: Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
            reference: Box::new(move |a| linear_ref(&a[0], n, d, &a[1], k, Some(&a[2]))),
        });
    }

    // batch norm, both modes
    {
        let n = r.gen_range(2..=3);
        let c = r.gen_range(1..=3);
        let h = r.gen_range(2..=3);
        let w = r.gen_range(2..=3);
        let shape = [n, c, h, w];
        let x = with_grad(tensor(&shape, uniform(&mut r, n * c * h * w, -2.0, 2.0)));
        let g = with_grad(tensor(&[c], uniform(&mut r, c, 0.5, 1.5)));
        let b = with_grad(tensor(&[c], uniform(&mut r, c, -0.5, 0.5)));
        cases.push(GradCase {
            name: "batch_norm_train",
            inputs: vec![x.clone(), g.clone(), b.clone()],
            record: Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], BnStats::Batch(None)).unwrap()),
            reference: Box::new(move |a| bn_train_ref(&a[0], shape, &a[1], &a[2], 1e-5)),
        });
        let mean = uniform(&mut r, c, -0.5, 0.5);
        let var = uniform(&mut r, c, 0.5, 2.0);
        let (m64, v64) = (to_f64(&mean), to_f64(&var));
        cases.push(GradCase {
            name: "batch_norm_eval",
            inputs: vec![x, g, b],
            record: Box::new(move |t, v| {
                t.batch_norm(v[0], v[1], v[2], BnStats::Running { mean: &mean, var: &var })
                    .unwrap()
            }),
            reference: Box::new(move |a| bn_eval_ref(&a[0], shape, &a[1], &a[2], &m64, &v64, 1e-5)),
        });
    }

    // relu
    {
        let len = r.gen_range(2..=24);
        let x = with_grad(tensor(&[len], separated(&mut r, len, 0.05)));
        cases.push(GradCase {
            name: "relu",
            inputs: vec![x],
            record: Box::new(|t, v| t.relu(v[0])),
            reference: Box::new(|a| a[0].iter().map(|&v| v.max(0.0)).collect()),
        });
    }

    // max pool: halving window and the 3x3/2 stem window
    {
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=2);
        let h = r.gen_range(3..=6);
        let w = r.gen_range(3..=6);
        let spec = if r.gen_bool(0.5) {
            PoolSpec::HALVE
        } else {
            PoolSpec { kernel: 3, stride: 2, pad: 1 }
        };
        let x = with_grad(tensor(&[n, c, h, w], separated(&mut r, n * c * h * w, 0.05)));
        cases.push(GradCase {
            name: "max_pool",
            inputs: vec![x],
            record: Box::new(move |t, v| t.max_pool(v[0], spec).unwrap()),
            reference: Box::new(move |a| maxpool_ref(&a[0], [n, c, h, w], spec.kernel, spec.stride, spec.pad)),
        });
    }

    // global average pool
    {
        let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
        let len = shape.iter().product();
        let x = with_grad(tensor(&shape, uniform(&mut r, len, -1.0, 1.0)));
        cases.push(GradCase {
            name: "global_avg_pool",
            inputs: vec![x],
            record: Box::new(|t, v| t.global_avg_pool(v[0]).unwrap()),
            reference: Box::new(move |a| gap_ref(&a[0], shape)),
        });
    }

    // residual add
    {
        let len = r.gen_range(1..=16);
        let a = with_grad(tensor(&[len], uniform(&mut r, len, -1.0, 1.0)));
        let b = with_grad(tensor(&[len], uniform(&mut r, len, -1.0, 1.0)));
        cases.push(GradCase {
            name: "add",
            inputs: vec![a, b],
            record: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            reference: Box::new(|a| a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect()),
        });
    }

    // cross entropy
    {
        let n = r.gen_range(1..=5);
        let m = r.gen_range(2..=4);
        let z = with_grad(tensor(&[n, m], uniform(&mut r, n * m, -3.0, 3.0)));
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..m)).collect();
        let l2 = labels.clone();
        cases.push(GradCase {
            name: "cross_entropy",
            inputs: vec![z],
            record: Box::new(move |t, v| t.cross_entropy(v[0], &labels).unwrap()),
            reference: Box::new(move |a| vec![cross_entropy_ref(&a[0], n, m, &l2)]),
        });
    }

    cases
}
