mod common;

use common::*;
use filterprune::autodiff::{BnStats, PoolSpec, Tape};
use filterprune::Tensor;

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut r = rng(11);
    let x = uniform(&mut r, 2 * 3 * 8 * 8, -1.0, 1.0);
    let w = uniform(&mut r, 4 * 3 * 3 * 3, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(&tensor(&[2, 3, 8, 8], x.clone()));
    let wv = tape.leaf(&tensor(&[4, 3, 3, 3], w.clone()));
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    let expected = conv2d_ref(&to_f64(&x), [2, 3, 8, 8], &to_f64(&w), 4, 3, 2, 1);
    for (a, b) in tape.value(y).iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn conv2d_oracle_across_geometries() {
    let mut r = rng(12);
    for &(c, h, f, k, s, p) in &[
        (1, 7, 2, 7, 2, 3),
        (3, 9, 5, 1, 2, 0),
        (2, 6, 3, 3, 1, 1),
        (4, 5, 2, 1, 1, 0),
        (2, 11, 3, 3, 2, 0),
    ] {
        let x = uniform(&mut r, 2 * c * h * h, -1.0, 1.0);
        let w = uniform(&mut r, f * c * k * k, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&tensor(&[2, c, h, h], x.clone()));
        let wv = tape.leaf(&tensor(&[f, c, k, k], w.clone()));
        let y = tape.conv2d(xv, wv, s, p).unwrap();
        let expected = conv2d_ref(&to_f64(&x), [2, c, h, h], &to_f64(&w), f, k, s, p);
        assert_eq!(tape.value(y).len(), expected.len());
        for (a, b) in tape.value(y).iter().zip(&expected) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn linear_matches_loop_oracle() {
    let mut r = rng(13);
    let x = uniform(&mut r, 15, -1.0, 1.0);
    let w = uniform(&mut r, 10, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(&tensor(&[3, 5], x.clone()));
    let wv = tape.leaf(&tensor(&[2, 5], w.clone()));
    let y = tape.linear(xv, wv, None).unwrap();
    let expected = linear_ref(&to_f64(&x), 3, 5, &to_f64(&w), 2, None);
    for (a, b) in tape.value(y).iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn batch_norm_eval_matches_elementwise_formula() {
    let mut r = rng(14);
    let x = uniform(&mut r, 2 * 3 * 4 * 4, -2.0, 2.0);
    let g = uniform(&mut r, 3, 0.5, 1.5);
    let b = uniform(&mut r, 3, -1.0, 1.0);
    let mean = uniform(&mut r, 3, -0.5, 0.5);
    let var = uniform(&mut r, 3, 0.2, 3.0);
    let expected = bn_eval_ref(
        &to_f64(&x),
        [2, 3, 4, 4],
        &to_f64(&g),
        &to_f64(&b),
        &to_f64(&mean),
        &to_f64(&var),
        1e-5,
    );
    let mut tape = Tape::new();
    let xv = tape.leaf(&tensor(&[2, 3, 4, 4], x));
    let gv = tape.leaf(&tensor(&[3], g));
    let bv = tape.leaf(&tensor(&[3], b));
    let y = tape
        .batch_norm(xv, gv, bv, BnStats::Running { mean: &mean, var: &var })
        .unwrap();
    for (a, e) in tape.value(y).iter().zip(&expected) {
        assert!((*a as f64 - e).abs() < 1e-5);
    }
}

#[test]
fn global_avg_pool_matches_mean_oracle() {
    let mut r = rng(15);
    let x = uniform(&mut r, 32, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(&tensor(&[1, 2, 4, 4], x.clone()));
    let y = tape.global_avg_pool(xv).unwrap();
    assert_eq!(tape.shape(y), &[1, 2]);
    let expected = gap_ref(&to_f64(&x), [1, 2, 4, 4]);
    for (a, b) in tape.value(y).iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
}

#[test]
fn max_pool_matches_oracle() {
    let mut r = rng(16);
    let x = uniform(&mut r, 2 * 2 * 7 * 6, -1.0, 1.0);
    for spec in [PoolSpec::HALVE, PoolSpec { kernel: 3, stride: 2, pad: 1 }] {
        let mut tape = Tape::new();
        let xv = tape.leaf(&tensor(&[2, 2, 7, 6], x.clone()));
        let y = tape.max_pool(xv, spec).unwrap();
        let expected = maxpool_ref(&to_f64(&x), [2, 2, 7, 6], spec.kernel, spec.stride, spec.pad);
        assert_eq!(tape.value(y).len(), expected.len());
        for (a, b) in tape.value(y).iter().zip(&expected) {
            assert_eq!(*a as f64, *b);
        }
    }
}

#[test]
fn cross_entropy_matches_high_precision_reference() {
    let mut r = rng(17);
    let z = uniform(&mut r, 8, -4.0, 4.0);
    let labels = [0, 1, 1, 0];
    let mut tape = Tape::new();
    let zv = tape.leaf(&tensor(&[4, 2], z.clone()));
    let l = tape.cross_entropy(zv, &labels).unwrap();
    let expected = cross_entropy_ref(&to_f64(&z), 4, 2, &labels);
    assert!((tape.value(l)[0] as f64 - expected).abs() < 1e-5);
}

#[test]
fn linear_cross_entropy_gradients_match_finite_differences() {
    let mut r = rng(18);
    let (n, d, k) = (4, 5, 2);
    let x = uniform(&mut r, n * d, -1.0, 1.0);
    let w = uniform(&mut r, k * d, -1.0, 1.0);
    let b = uniform(&mut r, k, -0.5, 0.5);
    let labels = [0usize, 1, 1, 0];

    let mut tape = Tape::new();
    let xv = tape.leaf(&tensor(&[n, d], x.clone()));
    let wv = tape.leaf(&tensor(&[k, d], w.clone()).with_requires_grad(true));
    let bv = tape.leaf(&tensor(&[k], b.clone()).with_requires_grad(true));
    let z = tape.linear(xv, wv, Some(bv)).unwrap();
    let l = tape.cross_entropy(z, &labels).unwrap();
    tape.backward(l).unwrap();

    let (x64, w64, b64) = (to_f64(&x), to_f64(&w), to_f64(&b));
    let fw = |wt: &[f64]| cross_entropy_ref(&linear_ref(&x64, n, d, wt, k, Some(&b64)), n, k, &labels);
    let fb = |bt: &[f64]| cross_entropy_ref(&linear_ref(&x64, n, d, &w64, k, Some(bt)), n, k, &labels);
    let gw = central_differences(fw, &w64, FD_STEP);
    let gb = central_differences(fb, &b64, FD_STEP);
    for (a, e) in tape.grad(wv).unwrap().iter().zip(&gw) {
        assert!(rel_err(*a as f64, *e) < 1e-4, "{a} vs {e}");
    }
    for (a, e) in tape.grad(bv).unwrap().iter().zip(&gb) {
        assert!(rel_err(*a as f64, *e) < 1e-4, "{a} vs {e}");
    }
}

#[test]
fn every_op_passes_gradient_check() {
    for trial in 0..20u64 {
        for case in gradient_cases(trial) {
            let err = grad_check(&case, trial);
            assert!(err < 1e-4, "{} trial {trial}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn composed_ops_keep_shape_algebra() {
    let mut r = rng(19);
    let mut tape = Tape::new();
    let x = tape.leaf(&tensor(&[2, 1, 9, 9], uniform(&mut r, 162, -1.0, 1.0)));
    let w = tape.leaf(&tensor(&[3, 1, 3, 3], uniform(&mut r, 27, -1.0, 1.0)).with_requires_grad(true));
    let g = tape.leaf(&Tensor::ones(&[3]).with_requires_grad(true));
    let b = tape.leaf(&Tensor::zeros(&[3]).with_requires_grad(true));
    let c = tape.conv2d(x, w, 2, 1).unwrap();
    let n = tape.batch_norm(c, g, b, BnStats::Batch(None)).unwrap();
    let a = tape.relu(n);
    let p = tape.max_pool(a, PoolSpec::HALVE).unwrap();
    let s = tape.add(p, p).unwrap();
    let q = tape.global_avg_pool(s).unwrap();
    for v in [c, n, a, p, s, q] {
        assert_eq!(tape.shape(v).iter().product::<usize>(), tape.value(v).len());
    }
    assert_eq!(tape.shape(q), &[2, 3]);
}
