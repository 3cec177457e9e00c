use super::kernels::{self, ConvGeom, PoolGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Elements per channel, `N·H·W`.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddLead {
        a: usize,
        b: usize,
        inner: usize,
    },
    MulLead {
        a: usize,
        b: usize,
        inner: usize,
    },
    Tile {
        a: usize,
        times: usize,
    },
    SliceCols {
        a: usize,
        rows: usize,
        cols: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
    },
    ChannelAffine {
        x: usize,
        mul: Vec<f64>,
        channels: usize,
        inner: usize,
    },
    AvgPool {
        x: usize,
        geom: PoolGeom,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the backward sweep is a plain reverse iteration.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` onto the tape. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    pub fn variable(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are well formed")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a), self.value(b), m, k, n);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, &[a.0]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu { a: a.0 }, &[a.0])
    }

    fn lead_inner(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(numel(&sa[sb.len()..]))
    }

    /// `a + b` where `b`'s shape is a leading prefix of `a`'s; `b` is
    /// broadcast over the trailing axes.
    pub fn add_lead(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.lead_inner("add_lead", a, b)?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i / inner])
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::AddLead { a: a.0, b: b.0, inner },
            &[a.0, b.0],
        ))
    }

    /// `a * b` with the same broadcasting rule as [`Tape::add_lead`].
    pub fn mul_lead(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.lead_inner("mul_lead", a, b)?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i / inner])
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::MulLead { a: a.0, b: b.0, inner },
            &[a.0, b.0],
        ))
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        self.push(shape, out, Op::Tile { a: a.0, times }, &[a.0])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape("slice_cols", s, &[start, end]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        Ok(self.push(
            vec![rows, end - start],
            out,
            Op::SliceCols {
                a: a.0,
                rows,
                cols,
                start,
                end,
            },
            &[a.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape, out, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::shape("flatten", s, &[]));
        }
        let shape = vec![s[0], numel(&s[1..])];
        self.reshape(a, shape)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean softmax cross-entropy of `logits[m×c]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", s, &[targets.len()]));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label { label: bad, classes: c });
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= denom;
            }
            total += max + denom.ln() - row[targets[i]];
        }
        let loss = total / m as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
                classes: c,
            },
            &[logits.0],
        ))
    }

    // ---- convolution / normalization / pooling --------------------------

    pub fn conv2d(&mut self, x: Var, filters: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(filters), stride, pad)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(filters), &geom);
        Ok(self.push(
            geom.out_shape(),
            out,
            Op::Conv2d {
                x: x.0,
                w: filters.0,
                geom,
            },
            &[x.0, filters.0],
        ))
    }

    fn channel_layout(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1], numel(&s[2..])))
    }

    /// Training-mode normalization over every axis except the channel axis
    /// (axis 1). Returns the normalized values `x̂` (no affine) and the batch
    /// statistics used.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.channel_layout("batch_norm", x)?;
        let count = n * inner;
        if count < 2 {
            return Err(Error::DegenerateBatch(format!(
                "batch norm needs at least 2 elements per channel, got {count}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config("batch norm eps must be positive".into()));
        }
        let v = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (b * c + ch) * inner;
                *m += v[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                var[ch] += v[base..base + inner]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|s| *s /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = vec![0.0; v.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *o = (v[i] - mean[ch]) * inv_std[ch];
        }
        let shape = self.shape(x).to_vec();
        let var_out = self.push(
            shape,
            out,
            Op::BatchNorm {
                x: x.0,
                inv_std,
                channels: c,
                inner,
            },
            &[x.0],
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Inference-mode normalization with fixed statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, c, inner) = self.channel_layout("normalize_fixed", x)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("normalize_fixed", self.shape(x), &[mean.len()]));
        }
        let mul: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let v = self.value(x);
        let out = v
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let ch = (i / inner) % c;
                (x - mean[ch]) * mul[ch]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::ChannelAffine {
                x: x.0,
                mul,
                channels: c,
                inner,
            },
            &[x.0],
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let geom = PoolGeom::new(&s, k)?;
        let out = kernels::avg_pool_forward(self.value(x), &geom);
        Ok(self.push(
            vec![s[0], s[1], s[2] / k, s[3] / k],
            out,
            Op::AvgPool { x: x.0, geom },
            &[x.0],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // only tensors that asked for gradients keep them
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_a_bt_acc(g, &self.nodes[b].value, m, n, k, &mut ga);
                    add_into(&mut grads[a], ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_at_b_acc(&self.nodes[a].value, g, m, k, n, &mut gb);
                    add_into(&mut grads[b], gb);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if self.wants(a) {
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] = g[c * rows + r];
                        }
                    }
                    add_into(&mut grads[a], ga);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.to_vec());
                }
                if self.wants(b) {
                    add_into(&mut grads[b], g.to_vec());
                }
            }
            &Op::Sub { a, b } => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.to_vec());
                }
                if self.wants(b) {
                    add_into(&mut grads[b], g.iter().map(|x| -x).collect());
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    add_into(&mut grads[a], g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.wants(b) {
                    add_into(&mut grads[b], g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale { a, c } => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.iter().map(|x| x * c).collect());
                }
            }
            &Op::AddLead { a, b, inner } => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.to_vec());
                }
                if self.wants(b) {
                    let gb = g.chunks(inner).map(|ch| ch.iter().sum()).collect();
                    add_into(&mut grads[b], gb);
                }
            }
            &Op::MulLead { a, b, inner } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let ga = g.iter().enumerate().map(|(j, x)| x * vb[j / inner]).collect();
                    add_into(&mut grads[a], ga);
                }
                if self.wants(b) {
                    let gb = g
                        .chunks(inner)
                        .zip(va.chunks(inner))
                        .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| x * y).sum())
                        .collect();
                    add_into(&mut grads[b], gb);
                }
            }
            &Op::Tile { a, times } => {
                if self.wants(a) {
                    let len = g.len() / times;
                    let mut ga = vec![0.0; len];
                    for chunk in g.chunks(len) {
                        ga.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    add_into(&mut grads[a], ga);
                }
            }
            &Op::SliceCols {
                a,
                rows,
                cols,
                start,
                end,
            } => {
                if self.wants(a) {
                    let w = end - start;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    add_into(&mut grads[a], ga);
                }
            }
            &Op::Reshape { a } => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.to_vec());
                }
            }
            &Op::Relu { a } => {
                if self.wants(a) {
                    let va = &self.nodes[a].value;
                    let ga = g.iter().zip(va).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }).collect();
                    add_into(&mut grads[a], ga);
                }
            }
            &Op::Conv2d { x, w, ref geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    &self.nodes[x].value,
                    &self.nodes[w].value,
                    g,
                    geom,
                    self.wants(x),
                    self.wants(w),
                );
                if let Some(dx) = dx {
                    add_into(&mut grads[x], dx);
                }
                if let Some(dw) = dw {
                    add_into(&mut grads[w], dw);
                }
            }
            Op::BatchNorm {
                x,
                inv_std,
                channels,
                inner,
            } => {
                let (x, c, inner) = (*x, *channels, *inner);
                if self.wants(x) {
                    let xhat = &node.value;
                    let n = xhat.len() / (c * inner);
                    let count = (n * inner) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (idx, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
                        let ch = (idx / inner) % c;
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(idx, (&gv, &xv))| {
                            let ch = (idx / inner) % c;
                            inv_std[ch] / count * (count * gv - sum_g[ch] - xv * sum_gx[ch])
                        })
                        .collect();
                    add_into(&mut grads[x], gx);
                }
            }
            Op::ChannelAffine {
                x,
                mul,
                channels,
                inner,
            } => {
                if self.wants(*x) {
                    let gx = g
                        .iter()
                        .enumerate()
                        .map(|(idx, gv)| gv * mul[(idx / inner) % channels])
                        .collect();
                    add_into(&mut grads[*x], gx);
                }
            }
            Op::AvgPool { x, geom } => {
                if self.wants(*x) {
                    add_into(&mut grads[*x], kernels::avg_pool_backward(g, geom));
                }
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    add_into(&mut grads[a], vec![g[0]; self.nodes[a].value.len()]);
                }
            }
            &Op::Mean { a } => {
                if self.wants(a) {
                    let len = self.nodes[a].value.len();
                    add_into(&mut grads[a], vec![g[0] / len as f64; len]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
                classes,
            } => {
                if self.wants(*logits) {
                    let m = targets.len();
                    let scale = g[0] / m as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * classes + t] -= scale;
                    }
                    add_into(&mut grads[*logits], gl);
                }
            }
        }
    }
}
