//! Low-rank hyper-layers.
//!
//! A hyper-layer produces its weight from the hyperparameters as
//! `W(λ) = φ0 + diag(φV λ) φU`: row `i` of the base weight `φ0` moves along
//! row `i` of `φU` by the scalar `(φV λ)_i`. Convolutions apply this per
//! output filter and batch norm to the stacked `[scale; offset]` vector.
//!
//! Because `W(λ)` is affine in the per-row coefficients, a batch where every
//! example carries its own λ needs no per-example weights:
//! `x_i W(λ_i)ᵀ = x_i φ0ᵀ + (φV λ_i) ⊙ (x_i φUᵀ)`, and the same holds for
//! convolutions filter by filter. [`forward_hyper`] uses that identity, so
//! every strategy runs as a handful of batched products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, NetworkSpec};
use crate::rng::{self, StreamRng};
use crate::tensor::{BatchStats, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SharingStrategy {
    #[serde(rename = "conv-bn")]
    ConvPlusBN,
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "bn")]
    BN,
    #[serde(rename = "first-conv")]
    FirstConv,
    #[serde(rename = "first-bn")]
    FirstBN,
    #[serde(rename = "all")]
    All,
    #[serde(rename = "none")]
    None,
}

impl SharingStrategy {
    pub const ALL: [SharingStrategy; 7] = [
        SharingStrategy::ConvPlusBN,
        SharingStrategy::Conv,
        SharingStrategy::BN,
        SharingStrategy::FirstConv,
        SharingStrategy::FirstBN,
        SharingStrategy::All,
        SharingStrategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SharingStrategy::ConvPlusBN => "conv-bn",
            SharingStrategy::Conv => "conv",
            SharingStrategy::BN => "bn",
            SharingStrategy::FirstConv => "first-conv",
            SharingStrategy::FirstBN => "first-bn",
            SharingStrategy::All => "all",
            SharingStrategy::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!(
                "unknown strategy `{name}`; valid strategies: {}",
                names.join(", ")
            ))
        })
    }
}

impl std::fmt::Display for SharingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTag {
    Shared,
    Hyper,
}

/// One tag per layer of a [`NetworkSpec`]. Parameter-free layers are Shared.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperNetworkPlan {
    pub tags: Vec<LayerTag>,
}

impl HyperNetworkPlan {
    pub fn hyper_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == LayerTag::Hyper)
            .map(|(i, _)| i)
    }

    pub fn has_hyper(&self) -> bool {
        self.tags.contains(&LayerTag::Hyper)
    }
}

pub fn plan_from_strategy(spec: &NetworkSpec, strategy: SharingStrategy) -> Result<HyperNetworkPlan> {
    let missing = |what: &str| {
        Error::Strategy(format!(
            "strategy {strategy} needs a {what} layer but the network has none"
        ))
    };
    let first_conv = spec.first_index(LayerKind::Conv);
    let first_bn = spec.first_index(LayerKind::BatchNorm);
    let hyper = |i: usize, kind: LayerKind| -> bool {
        match strategy {
            SharingStrategy::ConvPlusBN => matches!(kind, LayerKind::Conv | LayerKind::BatchNorm),
            SharingStrategy::Conv => kind == LayerKind::Conv,
            SharingStrategy::BN => kind == LayerKind::BatchNorm,
            SharingStrategy::FirstConv => Some(i) == first_conv,
            SharingStrategy::FirstBN => Some(i) == first_bn,
            SharingStrategy::All => kind != LayerKind::Stateless,
            SharingStrategy::None => false,
        }
    };
    match strategy {
        SharingStrategy::Conv | SharingStrategy::FirstConv if first_conv.is_none() => {
            return Err(missing("convolution"))
        }
        SharingStrategy::BN | SharingStrategy::FirstBN if first_bn.is_none() => return Err(missing("batch norm")),
        SharingStrategy::ConvPlusBN if first_conv.is_none() && first_bn.is_none() => {
            return Err(missing("convolution or batch norm"))
        }
        _ => {}
    }
    let tags = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if hyper(i, l.kind()) {
                LayerTag::Hyper
            } else {
                LayerTag::Shared
            }
        })
        .collect();
    Ok(HyperNetworkPlan { tags })
}

/// `W = φ0 + diag(φV λ) φU` for a linear layer, plus the bias analogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperLinearParams {
    pub phi0_w: Tensor,
    pub phiu_w: Tensor,
    pub phiv_w: Tensor,
    pub phi0_b: Tensor,
    pub phiu_b: Tensor,
    pub phiv_b: Tensor,
}

/// Filter-wise `φ0_j + (φV λ)_j φU_j`, optional bias triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConvParams {
    pub phi0: Tensor,
    pub phiu: Tensor,
    pub phiv: Tensor,
    pub bias: Option<[Tensor; 3]>,
}

/// `[scale; offset] = φ0 + diag(φV λ) φU` over `2c` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperBnParams {
    pub phi0: Tensor,
    pub phiu: Tensor,
    pub phiv: Tensor,
}

/// `φV λ` for a `[rows × n]` matrix.
fn row_coeffs(phiv: &Tensor, lambda: &[f64]) -> Result<Vec<f64>> {
    let s = phiv.shape();
    if s.len() != 2 || s[1] != lambda.len() {
        return Err(Error::shape("hyper-layer", s, &[lambda.len()]));
    }
    Ok(phiv
        .data()
        .chunks(s[1])
        .map(|row| row.iter().zip(lambda).map(|(a, b)| a * b).sum())
        .collect())
}

/// `φ0 + diag(c) φU` where rows are the leading axis of `φ0`.
fn scaled_rows(phi0: &Tensor, phiu: &Tensor, coeffs: &[f64]) -> Result<Tensor> {
    if phi0.shape() != phiu.shape() || phi0.shape()[0] != coeffs.len() {
        return Err(Error::shape("hyper-layer", phi0.shape(), phiu.shape()));
    }
    let inner = phi0.len() / coeffs.len();
    let data = phi0
        .data()
        .iter()
        .zip(phiu.data())
        .enumerate()
        .map(|(i, (a, u))| a + coeffs[i / inner] * u)
        .collect();
    Tensor::new(phi0.shape().to_vec(), data)
}

pub fn hyper_linear_weights(p: &HyperLinearParams, lambda: &[f64]) -> Result<Tensor> {
    scaled_rows(&p.phi0_w, &p.phiu_w, &row_coeffs(&p.phiv_w, lambda)?)
}

pub fn hyper_linear_bias(p: &HyperLinearParams, lambda: &[f64]) -> Result<Tensor> {
    scaled_rows(&p.phi0_b, &p.phiu_b, &row_coeffs(&p.phiv_b, lambda)?)
}

pub fn hyper_conv_weights(p: &HyperConvParams, lambda: &[f64]) -> Result<Tensor> {
    scaled_rows(&p.phi0, &p.phiu, &row_coeffs(&p.phiv, lambda)?)
}

pub fn hyper_conv_bias(p: &HyperConvParams, lambda: &[f64]) -> Result<Option<Tensor>> {
    p.bias
        .as_ref()
        .map(|[b0, bu, bv]| scaled_rows(b0, bu, &row_coeffs(bv, lambda)?))
        .transpose()
}

pub fn hyper_bn_affine(p: &HyperBnParams, lambda: &[f64]) -> Result<(Tensor, Tensor)> {
    let all = scaled_rows(&p.phi0, &p.phiu, &row_coeffs(&p.phiv, lambda)?)?;
    let c = all.len() / 2;
    Ok((
        Tensor::vector(all.data()[..c].to_vec()),
        Tensor::vector(all.data()[c..].to_vec()),
    ))
}

/// Trainable state of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    None,
    Conv { w: Tensor, b: Option<Tensor> },
    HyperConv(HyperConvParams),
    BatchNorm { scale: Tensor, offset: Tensor },
    HyperBatchNorm(HyperBnParams),
    Linear { w: Tensor, b: Tensor },
    HyperLinear(HyperLinearParams),
}

impl LayerParams {
    pub fn is_hyper(&self) -> bool {
        matches!(
            self,
            LayerParams::HyperConv(_) | LayerParams::HyperBatchNorm(_) | LayerParams::HyperLinear(_)
        )
    }

    /// Tensors in a fixed order; [`LayerParams::tensors_mut`] matches it.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { w, b } => std::iter::once(w).chain(b.as_ref()).collect(),
            LayerParams::HyperConv(p) => {
                let mut v = vec![&p.phi0, &p.phiu, &p.phiv];
                if let Some(b) = &p.bias {
                    v.extend(b.iter());
                }
                v
            }
            LayerParams::BatchNorm { scale, offset } => vec![scale, offset],
            LayerParams::HyperBatchNorm(p) => vec![&p.phi0, &p.phiu, &p.phiv],
            LayerParams::Linear { w, b } => vec![w, b],
            LayerParams::HyperLinear(p) => {
                vec![&p.phi0_w, &p.phiu_w, &p.phiv_w, &p.phi0_b, &p.phiu_b, &p.phiv_b]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::None => vec![],
            LayerParams::Conv { w, b } => std::iter::once(w).chain(b.as_mut()).collect(),
            LayerParams::HyperConv(p) => {
                let mut v = vec![&mut p.phi0, &mut p.phiu, &mut p.phiv];
                if let Some(b) = &mut p.bias {
                    v.extend(b.iter_mut());
                }
                v
            }
            LayerParams::BatchNorm { scale, offset } => vec![scale, offset],
            LayerParams::HyperBatchNorm(p) => vec![&mut p.phi0, &mut p.phiu, &mut p.phiv],
            LayerParams::Linear { w, b } => vec![w, b],
            LayerParams::HyperLinear(p) => vec![
                &mut p.phi0_w,
                &mut p.phiu_w,
                &mut p.phiv_w,
                &mut p.phi0_b,
                &mut p.phiu_b,
                &mut p.phiv_b,
            ],
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The plain weights at `lambda`; plain layers are returned unchanged.
    pub fn materialize(&self, lambda: &[f64]) -> Result<LayerParams> {
        let grad = |t: Tensor| t.with_grad();
        Ok(match self {
            LayerParams::HyperConv(p) => LayerParams::Conv {
                w: grad(hyper_conv_weights(p, lambda)?),
                b: hyper_conv_bias(p, lambda)?.map(grad),
            },
            LayerParams::HyperBatchNorm(p) => {
                let (scale, offset) = hyper_bn_affine(p, lambda)?;
                LayerParams::BatchNorm {
                    scale: grad(scale),
                    offset: grad(offset),
                }
            }
            LayerParams::HyperLinear(p) => LayerParams::Linear {
                w: grad(hyper_linear_weights(p, lambda)?),
                b: grad(hyper_linear_bias(p, lambda)?),
            },
            other => {
                let mut c = other.clone();
                c.tensors_mut().into_iter().for_each(|t| t.clear_grad());
                c
            }
        })
    }
}

/// Standard deviation of the `φV` initialization.
pub const PHI_V_STD: f64 = 0.01;

fn gaussian(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::normal(rng, 0.0, std)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents").with_grad()
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

/// Allocates one layer. Base weights get fan-in-scaled (He) normal init,
/// `φU` starts at zero and `φV` at small noise, so every λ initially maps
/// to the same conventionally initialized layer.
pub fn init_layer(layer: &LayerSpec, tag: LayerTag, n: usize, rng: &mut StreamRng) -> LayerParams {
    let hyper = tag == LayerTag::Hyper;
    match *layer {
        LayerSpec::Conv {
            c_in, c_out, k, bias, ..
        } => {
            let shape = [c_out, c_in, k, k];
            let w = gaussian(rng, &shape, (2.0 / (c_in * k * k) as f64).sqrt());
            if hyper {
                let phiv = gaussian(rng, &[c_out, n], PHI_V_STD);
                let bias = bias.then(|| [zeros(&[c_out]), zeros(&[c_out]), gaussian(rng, &[c_out, n], PHI_V_STD)]);
                LayerParams::HyperConv(HyperConvParams {
                    phi0: w,
                    phiu: zeros(&shape),
                    phiv,
                    bias,
                })
            } else {
                LayerParams::Conv {
                    w,
                    b: bias.then(|| zeros(&[c_out])),
                }
            }
        }
        LayerSpec::BatchNorm { c } => {
            if hyper {
                let mut phi0 = zeros(&[2 * c]);
                phi0.data_mut()[..c].fill(1.0);
                LayerParams::HyperBatchNorm(HyperBnParams {
                    phi0,
                    phiu: zeros(&[2 * c]),
                    phiv: gaussian(rng, &[2 * c, n], PHI_V_STD),
                })
            } else {
                LayerParams::BatchNorm {
                    scale: Tensor::full(&[c], 1.0).with_grad(),
                    offset: zeros(&[c]),
                }
            }
        }
        LayerSpec::Linear { input, output } => {
            let w = gaussian(rng, &[output, input], (2.0 / input as f64).sqrt());
            if hyper {
                LayerParams::HyperLinear(HyperLinearParams {
                    phi0_w: w,
                    phiu_w: zeros(&[output, input]),
                    phiv_w: gaussian(rng, &[output, n], PHI_V_STD),
                    phi0_b: zeros(&[output]),
                    phiu_b: zeros(&[output]),
                    phiv_b: gaussian(rng, &[output, n], PHI_V_STD),
                })
            } else {
                LayerParams::Linear { w, b: zeros(&[output]) }
            }
        }
        _ => LayerParams::None,
    }
}

/// Batch-norm population statistics, shared by every λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl RunningStats {
    pub fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    /// Exponential update; the variance tracks the unbiased batch estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let unbias = batch.count as f64 / (batch.count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// All parameters of a network plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
    pub running: Vec<Option<RunningStats>>,
}

impl ParamStore {
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.count()).sum()
    }

    pub fn hyper_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_hyper()).map(|l| l.count()).sum()
    }

    /// Copies gradients for `vars` (as returned by [`forward_hyper`]) into
    /// the matching tensors.
    pub fn assign_grads(&mut self, vars: &[Var], grads: &Gradients) -> Result<()> {
        let mut tensors = self.tensors_mut();
        if tensors.len() != vars.len() {
            return Err(Error::Contract(format!(
                "{} parameter vars for {} tensors",
                vars.len(),
                tensors.len()
            )));
        }
        for (t, &v) in tensors.iter_mut().zip(vars) {
            t.set_grad(grads.wrt(v))?;
        }
        Ok(())
    }

    pub fn commit_stats(&mut self, stats: &[Option<BatchStats>], momentum: f64) {
        for (run, s) in self.running.iter_mut().zip(stats) {
            if let (Some(run), Some(s)) = (run, s) {
                run.update(s, momentum);
            }
        }
    }
}

/// Hyperparameters fed to a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Lambda<'a> {
    /// No hyperparameters; only valid when no layer is Hyper.
    Absent,
    /// One row per example, `[m × n]`.
    Rows(&'a Tensor),
    /// The same λ for every example.
    Shared(&'a [f64]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the caller commits them to the running averages.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: BnMode,
    /// Record gradients for network parameters.
    pub param_grad: bool,
    /// Record gradients for λ.
    pub lambda_grad: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: BnMode::Train,
            param_grad: true,
            lambda_grad: false,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: BnMode::Eval,
            param_grad: false,
            lambda_grad: false,
        }
    }
}

pub struct HyperForward {
    pub logits: Var,
    /// One var per store tensor, in [`ParamStore::tensors`] order.
    pub params: Vec<Var>,
    /// The λ leaf: `[m × n]` for rows, `[1 × n]` when shared.
    pub lambda: Option<Var>,
    /// Batch statistics per layer (training mode batch norms only).
    pub stats: Vec<Option<BatchStats>>,
}

/// Runs `x` (`[m, ...input]`) through the network on `tape`.
pub fn forward_hyper(
    tape: &mut Tape,
    spec: &NetworkSpec,
    store: &ParamStore,
    lambda: Lambda<'_>,
    x: &Tensor,
    opts: ForwardOptions,
) -> Result<HyperForward> {
    let m = x.shape()[0];
    if x.shape()[1..] != spec.input[..] {
        return Err(Error::shape("network input", x.shape(), &spec.input));
    }
    if store.layers.len() != spec.layers.len() {
        return Err(Error::Contract("parameter store does not match the spec".into()));
    }
    let lam = match lambda {
        Lambda::Absent => None,
        Lambda::Rows(t) => {
            if t.shape().len() != 2 || t.shape()[0] != m {
                return Err(Error::Batch(format!(
                    "{m} examples but lambda batch has shape {:?}",
                    t.shape()
                )));
            }
            let v = if opts.lambda_grad {
                tape.variable(t)
            } else {
                tape.constant(t)
            };
            Some((v, v))
        }
        Lambda::Shared(l) => {
            let t = Tensor::matrix(1, l.len(), l.to_vec())?;
            let v = if opts.lambda_grad {
                tape.variable(&t)
            } else {
                tape.constant(&t)
            };
            let tiled = tape.tile(v, m);
            let rows = tape.reshape(tiled, vec![m, l.len()])?;
            Some((v, rows))
        }
    };
    let mut params = Vec::new();
    let mut bind = |tape: &mut Tape, t: &Tensor| {
        let v = if opts.param_grad {
            tape.leaf(t)
        } else {
            tape.constant(t)
        };
        params.push(v);
        v
    };
    let need_lambda = |index: usize| -> Result<Var> {
        lam.map(|(_, rows)| rows).ok_or_else(|| Error::Layer {
            index,
            message: "hyper layer needs lambda".into(),
        })
    };
    // (φV λ_i) for every example, [m × rows]
    let coeffs = |tape: &mut Tape, lam: Var, phiv: Var| -> Result<Var> {
        let t = tape.transpose(phiv)?;
        tape.matmul(lam, t)
    };
    // tile(φ0) + coeffs ⊙ tile(φU), [m × rows]
    let per_example = |tape: &mut Tape, c: Var, phi0: Var, phiu: Var| -> Result<Var> {
        let t0 = tape.tile(phi0, m);
        let tu = tape.tile(phiu, m);
        let d = tape.mul(c, tu)?;
        tape.add(t0, d)
    };

    let mut h = tape.constant(x);
    let mut stats = Vec::with_capacity(spec.layers.len());
    for (index, (layer, p)) in spec.layers.iter().zip(&store.layers).enumerate() {
        let mut layer_stats = None;
        let ctx = |e: Error| match e {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                index,
                message: e.to_string(),
            },
        };
        h = (|| -> Result<Var> {
            Ok(match (layer, p) {
                (&LayerSpec::Conv { stride, pad, .. }, LayerParams::Conv { w, b }) => {
                    let wv = bind(tape, w);
                    let y = tape.conv2d(h, wv, stride, pad)?;
                    match b {
                        Some(b) => {
                            let bv = bind(tape, b);
                            let tb = tape.tile(bv, m);
                            tape.add_lead(y, tb)?
                        }
                        None => y,
                    }
                }
                (&LayerSpec::Conv { stride, pad, .. }, LayerParams::HyperConv(hp)) => {
                    let lam = need_lambda(index)?;
                    let phi0 = bind(tape, &hp.phi0);
                    let phiu = bind(tape, &hp.phiu);
                    let phiv = bind(tape, &hp.phiv);
                    let base = tape.conv2d(h, phi0, stride, pad)?;
                    let delta = tape.conv2d(h, phiu, stride, pad)?;
                    let c = coeffs(tape, lam, phiv)?;
                    let scaled = tape.mul_lead(delta, c)?;
                    let y = tape.add(base, scaled)?;
                    match &hp.bias {
                        Some([b0, bu, bv]) => {
                            let (b0, bu, bv) = (bind(tape, b0), bind(tape, bu), bind(tape, bv));
                            let cb = coeffs(tape, lam, bv)?;
                            let bias = per_example(tape, cb, b0, bu)?;
                            tape.add_lead(y, bias)?
                        }
                        None => y,
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { scale, offset }) => {
                    let xhat = normalize(tape, h, index, store, opts.mode, &mut layer_stats)?;
                    let (s, o) = (bind(tape, scale), bind(tape, offset));
                    let ts = tape.tile(s, m);
                    let to = tape.tile(o, m);
                    let y = tape.mul_lead(xhat, ts)?;
                    tape.add_lead(y, to)?
                }
                (&LayerSpec::BatchNorm { c }, LayerParams::HyperBatchNorm(hp)) => {
                    let lam = need_lambda(index)?;
                    let xhat = normalize(tape, h, index, store, opts.mode, &mut layer_stats)?;
                    let phi0 = bind(tape, &hp.phi0);
                    let phiu = bind(tape, &hp.phiu);
                    let phiv = bind(tape, &hp.phiv);
                    let cf = coeffs(tape, lam, phiv)?;
                    let affine = per_example(tape, cf, phi0, phiu)?;
                    let scale = tape.slice_cols(affine, 0, c)?;
                    let offset = tape.slice_cols(affine, c, 2 * c)?;
                    let y = tape.mul_lead(xhat, scale)?;
                    tape.add_lead(y, offset)?
                }
                (LayerSpec::Linear { .. }, LayerParams::Linear { w, b }) => {
                    let (wv, bv) = (bind(tape, w), bind(tape, b));
                    let wt = tape.transpose(wv)?;
                    let y = tape.matmul(h, wt)?;
                    let tb = tape.tile(bv, m);
                    tape.add(y, tb)?
                }
                (LayerSpec::Linear { .. }, LayerParams::HyperLinear(hp)) => {
                    let lam = need_lambda(index)?;
                    let vars: Vec<Var> = [&hp.phi0_w, &hp.phiu_w, &hp.phiv_w, &hp.phi0_b, &hp.phiu_b, &hp.phiv_b]
                        .into_iter()
                        .map(|t| bind(tape, t))
                        .collect();
                    let t0 = tape.transpose(vars[0])?;
                    let base = tape.matmul(h, t0)?;
                    let tu = tape.transpose(vars[1])?;
                    let delta = tape.matmul(h, tu)?;
                    let cw = coeffs(tape, lam, vars[2])?;
                    let scaled = tape.mul(delta, cw)?;
                    let y = tape.add(base, scaled)?;
                    let cb = coeffs(tape, lam, vars[5])?;
                    let bias = per_example(tape, cb, vars[3], vars[4])?;
                    tape.add(y, bias)?
                }
                (LayerSpec::Relu, _) => tape.relu(h),
                (&LayerSpec::AvgPool { k }, _) => tape.avg_pool2d(h, k)?,
                (LayerSpec::Flatten, _) => tape.flatten(h)?,
                (l, p) => {
                    return Err(Error::Contract(format!(
                        "layer {l:?} paired with incompatible parameters {}",
                        match p {
                            LayerParams::None => "none",
                            _ => "of another kind",
                        }
                    )))
                }
            })
        })()
        .map_err(ctx)?;
        stats.push(layer_stats);
    }
    Ok(HyperForward {
        logits: h,
        params,
        lambda: lam.map(|(leaf, _)| leaf),
        stats,
    })
}

fn normalize(
    tape: &mut Tape,
    h: Var,
    index: usize,
    store: &ParamStore,
    mode: BnMode,
    stats: &mut Option<BatchStats>,
) -> Result<Var> {
    match mode {
        BnMode::Train => {
            let (xhat, s) = tape.batch_norm(h, BN_EPS)?;
            *stats = Some(s);
            Ok(xhat)
        }
        BnMode::Eval => {
            let run = store.running[index]
                .as_ref()
                .ok_or_else(|| Error::Contract("batch norm without running statistics".into()))?;
            tape.normalize_fixed(h, &run.mean, &run.var, BN_EPS)
        }
    }
}
