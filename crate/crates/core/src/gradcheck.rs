//! Finite-difference verification of every differentiable primitive and of
//! small networks under each sharing strategy.

use serde::Serialize;

use crate::error::Result;
use crate::hyperlayers::{ForwardOptions, Lambda, LayerParams, SharingStrategy};
use crate::network::{LayerSpec, Network, NetworkSpec};
use crate::rng::{self, StreamRng};
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub entries: usize,
    pub max_abs_err: f64,
    /// Largest relative error among entries outside the absolute tolerance.
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients entry by entry. An entry passes
/// when its absolute error is below [`ABS_TOL`] or its relative error is
/// below [`REL_TOL`].
pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> CheckReport {
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut passed = analytic.len() == numeric.len();
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        if abs > ABS_TOL {
            let rel = abs / a.abs().max(n.abs());
            max_rel = max_rel.max(rel);
            passed &= rel < REL_TOL;
        }
        passed &= a.is_finite() && n.is_finite();
    }
    CheckReport {
        name: name.to_string(),
        entries: analytic.len(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        passed,
    }
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_grad(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = f(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = f(&work)?;
            work[k].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    Ok(out)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks `build` by reducing its output to `Σ out ⊙ R` for a fixed random
/// `R`, so every output entry carries a distinct weight.
pub fn check_op(name: &str, inputs: &[Tensor], build: &Build, seed: u64) -> Result<Vec<CheckReport>> {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = build(&mut tape, &vars)?;
        uniform(&mut rng::stream(seed, &[0xfd]), tape.shape(out), 1.0)
    };
    let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        if tape.shape(out).iter().product::<usize>() == 1 {
            return Ok(out);
        }
        let r = tape.constant(&probe);
        let prod = tape.mul(out, r)?;
        Ok(tape.sum(prod))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    let numeric = numeric_grad(inputs, &|ts| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x)).collect();
        let l = loss(&mut t, &vs)?;
        Ok(t.scalar(l))
    })?;
    Ok(vars
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(k, (&v, n))| compare(&format!("{name}[{k}]"), &grads.wrt(v), n))
        .collect())
}

fn uniform(r: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * (2.0 * rng::open01(r) - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

/// Every primitive on small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut r = rng::stream(seed, &[0x9c]);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, 2.0);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Build| -> Result<()> {
        out.extend(check_op(name, &inputs, build, seed)?);
        Ok(())
    };
    run("matmul", vec![u(&[3, 4]), u(&[4, 2])], &|t, v| t.matmul(v[0], v[1]))?;
    run("transpose", vec![u(&[3, 4])], &|t, v| t.transpose(v[0]))?;
    run("add", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| t.sub(v[0], v[1]))?;
    run("mul", vec![u(&[2, 3]), u(&[2, 3])], &|t, v| t.mul(v[0], v[1]))?;
    run("scale", vec![u(&[5])], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run("relu", vec![u(&[4, 3])], &|t, v| Ok(t.relu(v[0])))?;
    run("add_lead", vec![u(&[2, 3, 4]), u(&[2, 3])], &|t, v| {
        t.add_lead(v[0], v[1])
    })?;
    run("mul_lead", vec![u(&[2, 3, 4]), u(&[2])], &|t, v| t.mul_lead(v[0], v[1]))?;
    run("tile", vec![u(&[2, 3])], &|t, v| Ok(t.tile(v[0], 3)))?;
    run("slice_cols", vec![u(&[3, 5])], &|t, v| t.slice_cols(v[0], 1, 4))?;
    run("reshape", vec![u(&[2, 6])], &|t, v| t.reshape(v[0], vec![3, 4]))?;
    run("flatten", vec![u(&[2, 2, 3])], &|t, v| t.flatten(v[0]))?;
    run("sum", vec![u(&[2, 3])], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![u(&[2, 3])], &|t, v| Ok(t.mean(v[0])))?;
    run("softmax_cross_entropy", vec![u(&[4, 3])], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])
    })?;
    run("conv2d", vec![u(&[2, 2, 5, 5]), u(&[3, 2, 3, 3])], &|t, v| {
        t.conv2d(v[0], v[1], 1, 1)
    })?;
    run("conv2d_strided", vec![u(&[2, 1, 7, 7]), u(&[2, 1, 3, 3])], &|t, v| {
        t.conv2d(v[0], v[1], 2, 0)
    })?;
    run("batch_norm", vec![u(&[4, 3, 2, 2])], &|t, v| {
        Ok(t.batch_norm(v[0], 1e-5)?.0)
    })?;
    run("batch_norm_2d", vec![u(&[5, 3])], &|t, v| {
        Ok(t.batch_norm(v[0], 1e-5)?.0)
    })?;
    run("normalize_fixed", vec![u(&[3, 2, 2, 2])], &|t, v| {
        t.normalize_fixed(v[0], &[0.1, -0.2], &[0.5, 1.5], 1e-5)
    })?;
    run("avg_pool2d", vec![u(&[2, 2, 4, 4])], &|t, v| t.avg_pool2d(v[0], 2))?;
    Ok(out)
}

/// A small conv network touching every layer kind.
pub fn tiny_conv_spec() -> NetworkSpec {
    NetworkSpec {
        input: vec![1, 6, 6],
        classes: 3,
        layers: vec![
            LayerSpec::Conv {
                c_in: 1,
                c_out: 2,
                k: 3,
                stride: 1,
                pad: 1,
                bias: true,
            },
            LayerSpec::BatchNorm { c: 2 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { k: 2 },
            LayerSpec::Conv {
                c_in: 2,
                c_out: 2,
                k: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
            LayerSpec::BatchNorm { c: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear { input: 18, output: 3 },
        ],
    }
}

/// Randomizes every hyper-layer's φU and φV so λ actually reaches the
/// output (the default init has φU = 0).
pub fn randomize_hyper(net: &mut Network, seed: u64) {
    let mut r = rng::stream(seed, &[0x4e]);
    for layer in &mut net.store.layers {
        let tensors: Vec<&mut Tensor> = match layer {
            LayerParams::HyperConv(p) => {
                let mut v = vec![&mut p.phiu, &mut p.phiv];
                if let Some([_, u, w]) = p.bias.as_mut() {
                    v.extend([u, w]);
                }
                v
            }
            LayerParams::HyperBatchNorm(p) => vec![&mut p.phiu, &mut p.phiv],
            LayerParams::HyperLinear(p) => vec![&mut p.phiu_w, &mut p.phiv_w, &mut p.phiu_b, &mut p.phiv_b],
            _ => continue,
        };
        for t in tensors {
            for v in t.data_mut() {
                *v = 0.5 * (2.0 * rng::open01(&mut r) - 1.0);
            }
        }
    }
}

/// ∇φ and ∇λ of a train-mode batch loss with per-example λ rows, for one
/// strategy.
pub fn network_check(strategy: SharingStrategy, seed: u64) -> Result<Vec<CheckReport>> {
    let spec = tiny_conv_spec();
    let n_lambda = 3;
    let batch = 4;
    let mut net = Network::build(&spec, strategy, n_lambda, seed)?;
    randomize_hyper(&mut net, seed);
    let mut r = rng::stream(seed, &[0x7a]);
    let x = uniform(&mut r, &[batch, 1, 6, 6], 2.0);
    let lam = uniform(&mut r, &[batch, n_lambda], 1.0);
    let labels = [0, 1, 2, 1];

    let loss_of = |net: &Network, lam: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, Lambda::Rows(lam), &x, ForwardOptions::train())?;
        let l = tape.softmax_cross_entropy(out.logits, &labels)?;
        Ok(tape.scalar(l))
    };

    let mut tape = Tape::new();
    let opts = ForwardOptions {
        lambda_grad: true,
        ..ForwardOptions::train()
    };
    let out = net.forward(&mut tape, Lambda::Rows(&lam), &x, opts)?;
    let l = tape.softmax_cross_entropy(out.logits, &labels)?;
    let grads = tape.backward(l)?;

    let params: Vec<Tensor> = net.store.tensors().into_iter().cloned().collect();
    let mut inputs = params.clone();
    inputs.push(lam.clone());
    let numeric = numeric_grad(&inputs, &|ts| {
        let mut probe = net.clone();
        for (dst, src) in probe.store.tensors_mut().into_iter().zip(ts) {
            dst.data_mut().copy_from_slice(src.data());
        }
        loss_of(&probe, &ts[ts.len() - 1])
    })?;

    let mut reports = Vec::new();
    let analytic_phi: Vec<f64> = out.params.iter().flat_map(|&v| grads.wrt(v)).collect();
    let numeric_phi: Vec<f64> = numeric[..params.len()].concat();
    reports.push(compare(&format!("{strategy}/phi"), &analytic_phi, &numeric_phi));
    let analytic_lam = match out.lambda {
        Some(v) => grads.wrt(v),
        None => vec![0.0; lam.len()],
    };
    reports.push(compare(
        &format!("{strategy}/lambda"),
        &analytic_lam,
        &numeric[params.len()],
    ));
    Ok(reports)
}

/// The full suite: primitives, then every sharing strategy.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = primitive_suite(seed)?;
    for s in SharingStrategy::ALL {
        out.extend(network_check(s, seed)?);
    }
    Ok(out)
}
