use hba_core::rng;
use hba_core::tensor::{Tape, Tensor, Var};
use hba_core::Error;
use proptest::prelude::*;

const H: f64 = 1e-6;

/// Central differences of `f` around `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + H;
            let up = f(&xs);
            xs[i] = orig - H;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if a.abs() < 1e-4 && n.abs() < 1e-4 {
            assert!((a - n).abs() < 1e-7, "entry {i}: {a} vs {n}");
        } else {
            let r = (a - n).abs() / a.abs().max(n.abs());
            assert!(r < rel, "entry {i}: {a} vs {n} (rel {r})");
        }
    }
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_values() {
    let mut tape = Tape::new();
    let eye = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(&Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    let ia = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(ia), &[1.0, 2.0, 3.0, 4.0]);
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(ab), &[2, 1]);
    assert_eq!(tape.value(ab), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_grad_matches_fd() {
    let a0 = random(1, &[3, 4]);
    let b0 = random(2, &[4, 2]);
    let eval = |ad: &[f64]| {
        let mut t = Tape::new();
        let a = t.constant(&with_data(&a0, ad));
        let b = t.constant(&b0);
        let ab = t.matmul(a, b).unwrap();
        let s = t.sum(ab);
        t.scalar(s)
    };
    let mut t = Tape::new();
    let a = t.variable(&a0);
    let b = t.constant(&b0);
    let ab = t.matmul(a, b).unwrap();
    let s = t.sum(ab);
    let g = t.backward(s).unwrap();
    assert_close(&g.wrt(a), &numeric_grad(a0.data(), eval), 1e-6);
}

/// Direct nested-loop cross-correlation.
fn conv_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_pointwise_and_hand_example() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.constant(&Tensor::full(&[1, 1, 1, 1], 2.0));
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.value(y), &[2.0; 9]);

    let x = t.constant(&Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
    let w = t.constant(&Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert_eq!(t.value(y), &[12.0, 16.0, 24.0, 28.0]);
}

#[test]
fn conv_non_integral_extent_is_config_error() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::zeros(&[1, 1, 4, 4]));
    let w = t.constant(&Tensor::zeros(&[1, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, w, 2, 0), Err(Error::Config(_))));
    assert!(matches!(t.conv2d(x, w, 0, 0), Err(Error::Config(_))));
    let big = t.constant(&Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(t.conv2d(x, big, 1, 0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_nested_loops(
        seed in any::<u64>(),
        n in 1usize..=2, ci in 1usize..=3, co in 1usize..=3,
        h in 3usize..=8, k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1,
    ) {
        let hp = h + 2 * pad;
        prop_assume!(k <= hp && (hp - k) % stride == 0);
        let x = random(seed, &[n, ci, h, h]);
        let w = random(seed ^ 1, &[co, ci, k, k]);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let wv = t.constant(&w);
        let y = t.conv2d(xv, wv, stride, pad).unwrap();
        let reference = conv_reference(&x, &w, stride, pad);
        // same multiply-adds, different association; compare tightly
        for (a, b) in t.value(y).iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn conv_grads_match_fd() {
    let x0 = random(3, &[2, 2, 5, 5]);
    let w0 = random(4, &[3, 2, 3, 3]);
    let weights = random(5, &[2, 3, 5, 5]);
    let run = |x: &Tensor, w: &Tensor, wx: bool| {
        let mut t = Tape::new();
        let (xv, wv) = if wx {
            (t.variable(x), t.variable(w))
        } else {
            (t.constant(x), t.constant(w))
        };
        let y = t.conv2d(xv, wv, 1, 1).unwrap();
        let c = t.constant(&weights);
        let m = t.mul(y, c).unwrap();
        let s = t.sum(m);
        (t, xv, wv, s)
    };
    let (t, xv, wv, s) = run(&x0, &w0, true);
    let g = t.backward(s).unwrap();
    let fw = numeric_grad(w0.data(), |d| {
        let (t, _, _, s) = run(&x0, &with_data(&w0, d), false);
        t.scalar(s)
    });
    assert_close(&g.wrt(wv), &fw, 1e-6);
    let fx = numeric_grad(x0.data(), |d| {
        let (t, _, _, s) = run(&with_data(&x0, d), &w0, false);
        t.scalar(s)
    });
    assert_close(&g.wrt(xv), &fx, 1e-6);
}

#[test]
fn batch_norm_normalizes_and_affine_collapses() {
    let x0 = random(6, &[4, 3, 2, 2]);
    let mut t = Tape::new();
    let x = t.constant(&x0);
    let (xhat, stats) = t.batch_norm(x, 1e-5).unwrap();
    let v = t.value(xhat);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..4).map(move |i| (b * 3 + c) * 4 + i))
            .map(|i| v[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        let expected = stats.var[c] / (stats.var[c] + 1e-5);
        assert!((var - expected).abs() < 1e-6, "{var} vs {expected}");
    }
    // scale 0, offset c
    let scale = t.constant(&Tensor::zeros(&[4, 3]));
    let offset = t.constant(&Tensor::full(&[4, 3], 0.75));
    let scaled = t.mul_lead(xhat, scale).unwrap();
    let out = t.add_lead(scaled, offset).unwrap();
    assert!(t.value(out).iter().all(|&o| o == 0.75));
}

#[test]
fn batch_norm_degenerate_batch() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::zeros(&[1, 2, 1, 1]));
    assert!(matches!(t.batch_norm(x, 1e-5), Err(Error::DegenerateBatch(_))));
}

#[test]
fn batch_norm_grads_match_fd() {
    let x0 = random(7, &[3, 2, 2, 2]);
    let sc0 = random(8, &[2]);
    let of0 = random(9, &[2]);
    let weights = random(10, &[3, 2, 2, 2]);
    let run = |x: &Tensor, sc: &Tensor, of: &Tensor| {
        let mut t = Tape::new();
        let xv = t.variable(x);
        let sv = t.variable(sc);
        let ov = t.variable(of);
        let (xhat, _) = t.batch_norm(xv, 1e-5).unwrap();
        let s2 = t.tile(sv, 3);
        let o2 = t.tile(ov, 3);
        let y = t.mul_lead(xhat, s2).unwrap();
        let y = t.add_lead(y, o2).unwrap();
        let c = t.constant(&weights);
        let m = t.mul(y, c).unwrap();
        let s = t.sum(m);
        (t, [xv, sv, ov], s)
    };
    let (t, vars, s) = run(&x0, &sc0, &of0);
    let g = t.backward(s).unwrap();
    let f = |x: &Tensor, sc: &Tensor, of: &Tensor| {
        let (t, _, s) = run(x, sc, of);
        t.scalar(s)
    };
    assert_close(
        &g.wrt(vars[0]),
        &numeric_grad(x0.data(), |d| f(&with_data(&x0, d), &sc0, &of0)),
        1e-5,
    );
    assert_close(
        &g.wrt(vars[1]),
        &numeric_grad(sc0.data(), |d| f(&x0, &with_data(&sc0, d), &of0)),
        1e-6,
    );
    assert_close(
        &g.wrt(vars[2]),
        &numeric_grad(of0.data(), |d| f(&x0, &sc0, &with_data(&of0, d))),
        1e-6,
    );
}

#[test]
fn cross_entropy_uniform_and_label_error() {
    let mut t = Tape::new();
    let z = t.constant(&Tensor::full(&[3, 4], 0.3));
    let l = t.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
    assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-9);
    assert!(matches!(
        t.softmax_cross_entropy(z, &[0, 4, 1]),
        Err(Error::Label { label: 4, classes: 4 })
    ));
}

#[test]
fn cross_entropy_is_stable_and_grad_matches_fd() {
    let mut t = Tape::new();
    let z = t.constant(&Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap());
    let l = t.softmax_cross_entropy(z, &[1]).unwrap();
    assert!((t.scalar(l) - 1000.0).abs() < 1e-9);

    let z0 = random(11, &[5, 3]);
    let targets = [0, 2, 1, 1, 0];
    let f = |d: &[f64]| {
        let mut t = Tape::new();
        let z = t.constant(&with_data(&z0, d));
        let l = t.softmax_cross_entropy(z, &targets).unwrap();
        t.scalar(l)
    };
    let mut t = Tape::new();
    let z = t.variable(&z0);
    let l = t.softmax_cross_entropy(z, &targets).unwrap();
    let g = t.backward(l).unwrap();
    assert_close(&g.wrt(z), &numeric_grad(z0.data(), f), 1e-6);
}

#[test]
fn relu_values() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::vector(vec![-1.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 2.0]);
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let w = t.variable(&Tensor::scalar(3.0));
    let sq = t.mul(w, w).unwrap();
    let g = t.backward(sq).unwrap();
    assert_eq!(g.wrt(w), vec![6.0]);
}

#[test]
fn non_scalar_loss_is_contract_error() {
    let mut t = Tape::new();
    let w = t.variable(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(w), Err(Error::Contract(_))));
}

#[test]
fn unreachable_variable_gets_zero() {
    let mut t = Tape::new();
    let a = t.variable(&Tensor::vector(vec![1.0, 2.0]));
    let b = t.variable(&Tensor::vector(vec![3.0]));
    let s = t.sum(a);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(b), vec![0.0]);
    assert_eq!(g.wrt(a), vec![1.0, 1.0]);
}

/// Two-layer MLP with every elementwise primitive in the path.
fn mlp_loss(t: &mut Tape, x: &Tensor, w1: &Tensor, w2: &Tensor, grad: bool) -> (Var, Var, Var) {
    let xv = t.constant(x);
    let (a, b) = if grad {
        (t.variable(w1), t.variable(w2))
    } else {
        (t.constant(w1), t.constant(w2))
    };
    let w1t = t.transpose(a).unwrap();
    let h = t.matmul(xv, w1t).unwrap();
    let h = t.relu(h);
    let h2 = t.scale(h, 0.5);
    let h = t.add(h, h2).unwrap();
    let h = t.sub(h, h2).unwrap();
    let z = t.matmul(h, b).unwrap();
    let l = t.softmax_cross_entropy(z, &[0, 1, 2, 1]).unwrap();
    (a, b, l)
}

#[test]
fn composite_mlp_matches_fd() {
    let x = random(12, &[4, 3]);
    let w1 = random(13, &[5, 3]);
    let w2 = random(14, &[5, 3]);
    let mut t = Tape::new();
    let (a, b, l) = mlp_loss(&mut t, &x, &w1, &w2, true);
    let g = t.backward(l).unwrap();
    let f1 = numeric_grad(w1.data(), |d| {
        let mut t = Tape::new();
        let (_, _, l) = mlp_loss(&mut t, &x, &with_data(&w1, d), &w2, false);
        t.scalar(l)
    });
    let f2 = numeric_grad(w2.data(), |d| {
        let mut t = Tape::new();
        let (_, _, l) = mlp_loss(&mut t, &x, &w1, &with_data(&w2, d), false);
        t.scalar(l)
    });
    assert_close(&g.wrt(a), &f1, 1e-5);
    assert_close(&g.wrt(b), &f2, 1e-5);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let x = random(15, &[4, 3]);
    let w1 = random(16, &[5, 3]);
    let w2 = random(17, &[5, 3]);
    let grads: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let mut t = Tape::new();
            let (a, _, l) = mlp_loss(&mut t, &x, &w1, &w2, true);
            t.backward(l).unwrap().wrt(a)
        })
        .collect();
    assert_eq!(
        grads[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        grads[1].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn pool_mean_slice_tile_reshape_grads() {
    let x0 = random(18, &[2, 2, 4, 4]);
    let weights = random(19, &[4, 4]);
    let run = |x: &Tensor, grad: bool| {
        let mut t = Tape::new();
        let xv = if grad { t.variable(x) } else { t.constant(x) };
        let p = t.avg_pool2d(xv, 2).unwrap();
        let f = t.flatten(p).unwrap();
        let f = t.reshape(f, vec![4, 4]).unwrap();
        let f = t.slice_cols(f, 1, 3).unwrap();
        let tiled = t.tile(f, 2);
        let c = t.constant(&weights);
        let cs = t.slice_cols(c, 0, 2).unwrap();
        let ct = t.tile(cs, 2);
        let m = t.mul(tiled, ct).unwrap();
        let m = t.relu(m);
        let s = t.mean(m);
        (t, xv, s)
    };
    let (t, xv, s) = run(&x0, true);
    let g = t.backward(s).unwrap();
    let fd = numeric_grad(x0.data(), |d| {
        let (t, _, s) = run(&with_data(&x0, d), false);
        t.scalar(s)
    });
    assert_close(&g.wrt(xv), &fd, 1e-5);
}

#[test]
fn normalize_fixed_uses_given_stats() {
    let mut t = Tape::new();
    let x = t.constant(&Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
    let y = t.normalize_fixed(x, &[1.0], &[4.0], 0.0).unwrap();
    assert_eq!(t.value(y), &[1.0, 2.0]);
}
