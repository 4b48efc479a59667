//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every op appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse, so the tape order is already a topological
//! order of the graph.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Batch-norm numerical guard added to the variance.
pub const BN_EPSILON: f32 = 1e-5;
/// Weight of the newest batch statistic in the running averages.
pub const BN_MOMENTUM: f32 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running statistics of a batch-norm layer, updated in training mode.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f32],
    pub var: &'a mut [f32],
}

/// Which statistics a batch-norm op normalizes with.
pub enum BnStats<'a> {
    /// Batch statistics; folded into the running averages when given.
    Batch(Option<RunningStats<'a>>),
    /// Fixed running statistics (inference).
    Running { mean: &'a [f32], var: &'a [f32] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub const HALVE: PoolSpec = PoolSpec {
        kernel: 2,
        stride: 2,
        pad: 0,
    };
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        input: Var,
        factor: Vec<f32>,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension(format!(
            "{what} expects a rank-4 [N, C, H, W] tensor, got {shape:?}"
        ))),
    }
}

fn add_owned(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

/// Sums `f(x)` in f64 over eight independent lanes; the fixed lane layout
/// keeps the result deterministic while letting the loop vectorize.
fn lane_sum(xs: &[f32], f: impl Fn(f32) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l += f(v);
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    lanes.iter().sum::<f64>() + tail
}

/// Lane-parallel f64 dot product of two equal-length slices.
fn lane_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x as f64 * y as f64).sum();
    lanes.iter().sum::<f64>() + tail
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a tensor as a leaf. Its `requires_grad` flag decides whether
    /// gradients are kept for it.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a tensor as a leaf with an explicit gradient flag.
    pub fn leaf_with_grad(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Leaf built from owned storage.
    pub fn leaf_owned(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copy of the recorded value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape invariant")
    }

    /// Moves the value out of the tape, leaving an empty node behind.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        let n = &mut self.nodes[v.0];
        let value = std::mem::take(&mut n.value);
        let shape = std::mem::take(&mut n.shape);
        Tensor::new(&shape, value).expect("tape node shape invariant")
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[F, C, k, k]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input), "conv2d input")?;
        let [f, wc, kh, kw] = dims4(self.shape(weight), "conv2d weight")?;
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv2d weight expects {wc} input channels, input has {c}"
            )));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let geom = conv_geom(c, h, w, kh, stride, pad)?;
        let mut out = vec![0.0; n * f * geom.out_area()];
        kernels::conv2d_forward(self.value(input), n, self.value(weight), f, &geom, &mut out);
        let rg = self.requires_grad(input) || self.requires_grad(weight);
        Ok(self.push(
            vec![n, f, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
        ))
    }

    /// Affine map `x W^T + b` for `[N, D]` input and `[K, D]` weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d) = match self.shape(input) {
            &[n, d] => (n, d),
            s => return Err(Error::Dimension(format!("linear expects [N, D] input, got {s:?}"))),
        };
        let (k, wd) = match self.shape(weight) {
            &[k, wd] => (k, wd),
            s => return Err(Error::Dimension(format!("linear expects [K, D] weight, got {s:?}"))),
        };
        if wd != d {
            return Err(Error::Dimension(format!(
                "linear weight has inner dimension {wd}, input has {d}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::Dimension(format!(
                    "linear bias has shape {:?}, expected [{k}]",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; n * k];
        if let Some(b) = bias {
            let bv = self.value(b);
            out.chunks_mut(k).for_each(|row| row.copy_from_slice(bv));
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        kernels::gemm(n, d, k, 1.0, self.value(input), (d, 1), self.value(weight), (1, d), beta, &mut out);
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(vec![n, k], out, rg, Op::Linear { input, weight, bias }))
    }

    /// Per-channel normalization of a `[N, C, H, W]` tensor.
    ///
    /// With [`BnStats::Batch`] the batch statistics normalize the input and
    /// update the running averages (momentum [`BN_MOMENTUM`], unbiased
    /// variance); with [`BnStats::Running`] the given statistics are used
    /// as-is.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, stats: BnStats<'_>) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input), "batch_norm input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm over {c} channels got gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let stat_lens = match &stats {
            BnStats::Batch(Some(r)) => Some((r.mean.len(), r.var.len())),
            BnStats::Batch(None) => None,
            BnStats::Running { mean, var } => Some((mean.len(), var.len())),
        };
        if stat_lens.is_some_and(|(m, v)| m != c || v != c) {
            return Err(Error::Dimension(format!(
                "batch_norm running statistics must have {c} entries"
            )));
        }
        let area = h * w;
        let count = n * area;
        let x = self.value(input);
        let (mean, inv_std, batch_stats) = match stats {
            BnStats::Batch(running) => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for img in 0..n {
                        let off = (img * c + ch) * area;
                        s += lane_sum(&x[off..off + area], |v| v as f64);
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for img in 0..n {
                        let off = (img * c + ch) * area;
                        ss += lane_sum(&x[off..off + area], |v| {
                            let d = v as f64 - m;
                            d * d
                        });
                    }
                    mean[ch] = m as f32;
                    var[ch] = (ss / count as f64) as f32;
                }
                if let Some(r) = running {
                    let unbias = if count > 1 {
                        count as f32 / (count - 1) as f32
                    } else {
                        1.0
                    };
                    for ch in 0..c {
                        r.mean[ch] = (1.0 - BN_MOMENTUM) * r.mean[ch] + BN_MOMENTUM * mean[ch];
                        r.var[ch] = (1.0 - BN_MOMENTUM) * r.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                    }
                }
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                (mean, inv_std, true)
            }
            BnStats::Running { mean, var } => {
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                (mean.to_vec(), inv_std, false)
            }
        };
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0.0; x.len()];
        for img in 0..n {
            for ch in 0..c {
                let off = (img * c + ch) * area;
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                for (o, &v) in out[off..off + area].iter_mut().zip(&x[off..off + area]) {
                    *o = v * scale + shift;
                }
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            vec![n, c, h, w],
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, Op::Relu { input })
    }

    /// Max pooling with implicit `-inf` padding; output extents are
    /// `floor((H + 2*pad - kernel) / stride) + 1`, so trailing rows or
    /// columns that do not fill a window are dropped.
    pub fn max_pool(&mut self, input: Var, spec: PoolSpec) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input), "max_pool input")?;
        if spec.stride == 0 || spec.kernel == 0 || spec.pad >= spec.kernel {
            return Err(Error::Config(format!("invalid pooling window {spec:?}")));
        }
        let oh = kernels::window_out_extent(h, spec.kernel, spec.stride, spec.pad)
            .ok_or_else(|| Error::Dimension(format!("pool window {spec:?} larger than {h}x{w}")))?;
        let ow = kernels::window_out_extent(w, spec.kernel, spec.stride, spec.pad)
            .ok_or_else(|| Error::Dimension(format!("pool window {spec:?} larger than {h}x{w}")))?;
        let x = self.value(input);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        let (k, st, pad) = (spec.kernel, spec.stride, spec.pad);
        // tap window of output position `o`, clipped to the input
        let taps = |o: usize, size: usize| {
            let start = (o * st).saturating_sub(pad);
            let end = (o * st + k - pad).min(size);
            (start, end)
        };
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let base = plane * oh * ow;
            for oy in 0..oh {
                let (y0, y1) = taps(oy, h);
                for ox in 0..ow {
                    let (x0, x1) = taps(ox, w);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for iy in y0..y1 {
                        let row = &src[iy * w + x0..iy * w + x1];
                        for (j, &v) in row.iter().enumerate() {
                            if v > best {
                                best = v;
                                best_idx = iy * w + x0 + j;
                            }
                        }
                    }
                    out[base + oy * ow + ox] = best;
                    argmax[base + oy * ow + ox] = (plane * h * w + best_idx) as u32;
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool { input, argmax }))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(input), "global_avg_pool input")?;
        let area = h * w;
        let x = self.value(input);
        let out = (0..n * c)
            .map(|p| x[p * area..(p + 1) * area].iter().sum::<f32>() / area as f32)
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool { input }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add of mismatched shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, rg, Op::Add { a, b }))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, factor: &Tensor) -> Result<Var> {
        if self.shape(input) != factor.shape() {
            return Err(Error::Dimension(format!(
                "mul_const of mismatched shapes {:?} and {:?}",
                self.shape(input),
                factor.shape()
            )));
        }
        let out = self
            .value(input)
            .iter()
            .zip(factor.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Mul {
                input,
                factor: factor.data().to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let rg = self.requires_grad(input);
        self.push(vec![], vec![s], rg, Op::Sum { input })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, m) = match self.shape(logits) {
            &[n, m] => (n, m),
            s => {
                return Err(Error::Dimension(format!(
                    "cross_entropy expects [N, M] logits, got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
        }
        if n == 0 {
            return Err(Error::Input("cross_entropy over an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Input(format!("label {bad} outside [0, {m})")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0f32; n * m];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &z[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let denom: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..m {
                probs[i * m + j] = (row[j] - max).exp() / denom;
            }
            total += (log_denom - (row[labels[i]] - max)) as f64;
        }
        let loss = (total / n as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates gradients from a scalar `loss` back to every recorded value
    /// that requires them. Intermediate gradients are released as soon as
    /// they have been propagated; leaf gradients are kept for [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage("loss does not depend on any parameter".into()));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &gout);
        }
        for node in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&node.op, &node.grad) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("gradient contains NaN or Inf".into()));
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gout: &[f32]) {
        // Ops only reference earlier nodes, so splitting at `idx` gives
        // shared access to inputs while this node's op is borrowed.
        let (before, rest) = self.nodes.split_at_mut(idx);
        let node = &rest[0];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let n = node.shape[0];
                let f = node.shape[1];
                let want_x = before[input.0].requires_grad;
                let want_w = before[weight.0].requires_grad;
                let mut gx = want_x.then(|| vec![0.0; before[input.0].value.len()]);
                let mut gw = want_w.then(|| vec![0.0; before[weight.0].value.len()]);
                kernels::conv2d_backward(
                    &before[input.0].value,
                    n,
                    &before[weight.0].value,
                    f,
                    geom,
                    gout,
                    gw.as_deref_mut(),
                    gx.as_deref_mut(),
                );
                if let Some(g) = gx {
                    add_owned(&mut before[input.0].grad, g);
                }
                if let Some(g) = gw {
                    add_owned(&mut before[weight.0].grad, g);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, k) = (node.shape[0], node.shape[1]);
                let d = before[input.0].shape[1];
                if before[input.0].requires_grad {
                    let mut gx = vec![0.0; n * d];
                    kernels::gemm(n, k, d, 1.0, gout, (k, 1), &before[weight.0].value, (d, 1), 0.0, &mut gx);
                    add_owned(&mut before[input.0].grad, gx);
                }
                if before[weight.0].requires_grad {
                    let mut gw = vec![0.0; k * d];
                    kernels::gemm(k, n, d, 1.0, gout, (1, k), &before[input.0].value, (d, 1), 0.0, &mut gw);
                    add_owned(&mut before[weight.0].grad, gw);
                }
                if let Some(b) = bias {
                    if before[b.0].requires_grad {
                        let mut gb = vec![0.0; k];
                        for row in gout.chunks(k) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        add_owned(&mut before[b.0].grad, gb);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = [node.shape[0], node.shape[1], node.shape[2], node.shape[3]];
                let area = h * w;
                let count = (n * area) as f32;
                let x = &before[input.0].value;
                let gv = &before[gamma.0].value;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ch in 0..c {
                    // sum(dy * xhat) = inv_std * (sum(dy * x) - mean * sum(dy))
                    let mut sdx = 0.0f64;
                    let mut sb = 0.0f64;
                    for img in 0..n {
                        let off = (img * c + ch) * area;
                        sdx += lane_dot(&gout[off..off + area], &x[off..off + area]);
                        sb += lane_sum(&gout[off..off + area], |v| v as f64);
                    }
                    dgamma[ch] = ((sdx - mean[ch] as f64 * sb) * inv_std[ch] as f64) as f32;
                    dbeta[ch] = sb as f32;
                }
                if before[input.0].requires_grad {
                    let mut gx = vec![0.0f32; x.len()];
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for img in 0..n {
                            let off = (img * c + ch) * area;
                            let dst = &mut gx[off..off + area];
                            if *batch_stats {
                                let mb = dbeta[ch] / count;
                                let mg = dgamma[ch] / count;
                                for ((o, &dy), &xv) in dst
                                    .iter_mut()
                                    .zip(&gout[off..off + area])
                                    .zip(&x[off..off + area])
                                {
                                    let xhat = (xv - mean[ch]) * inv_std[ch];
                                    *o = scale * (dy - mb - xhat * mg);
                                }
                            } else {
                                for (o, &dy) in dst.iter_mut().zip(&gout[off..off + area]) {
                                    *o = scale * dy;
                                }
                            }
                        }
                    }
                    add_owned(&mut before[input.0].grad, gx);
                }
                if before[gamma.0].requires_grad {
                    add_owned(&mut before[gamma.0].grad, dgamma);
                }
                if before[beta.0].requires_grad {
                    add_owned(&mut before[beta.0].grad, dbeta);
                }
            }
            Op::Relu { input } => {
                let gx: Vec<f32> = node
                    .value
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                add_owned(&mut before[input.0].grad, gx);
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![0.0f32; before[input.0].value.len()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    gx[src as usize] += g;
                }
                add_owned(&mut before[input.0].grad, gx);
            }
            Op::GlobalAvgPool { input } => {
                let xs = &before[input.0].shape;
                let area = xs[2] * xs[3];
                let scale = 1.0 / area as f32;
                let mut gx = vec![0.0f32; before[input.0].value.len()];
                for (p, &g) in gout.iter().enumerate() {
                    gx[p * area..(p + 1) * area]
                        .iter_mut()
                        .for_each(|v| *v = g * scale);
                }
                add_owned(&mut before[input.0].grad, gx);
            }
            Op::Add { a, b } => {
                if before[a.0].requires_grad {
                    add_into(&mut before[a.0].grad, gout);
                }
                if before[b.0].requires_grad {
                    add_into(&mut before[b.0].grad, gout);
                }
            }
            Op::Mul { input, factor } => {
                let gx: Vec<f32> = gout.iter().zip(factor).map(|(g, f)| g * f).collect();
                add_owned(&mut before[input.0].grad, gx);
            }
            Op::Sum { input } => {
                let gx = vec![gout[0]; before[input.0].value.len()];
                add_owned(&mut before[input.0].grad, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let m = probs.len() / n;
                let scale = gout[0] / n as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * m + l] -= scale;
                }
                add_owned(&mut before[logits.0].grad, gx);
            }
        }
    }
}

fn conv_geom(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    let extent = |size: usize| -> Result<usize> {
        kernels::window_out_extent(size, k, stride, pad).ok_or_else(|| {
            Error::Config(format!(
                "kernel {k} with stride {stride} and pad {pad} does not fit extent {size}"
            ))
        })
    };
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
        out_h: extent(h)?,
        out_w: extent(w)?,
    })
}

/// Output extent of a convolution: `floor((size + 2*pad - kernel) / stride) + 1`.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    Ok(conv_geom(1, size, size, kernel, stride, pad)?.out_h)
}
