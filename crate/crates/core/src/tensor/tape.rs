//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes are appended in evaluation order, so the
//! tape is already a topological order and [`Tape::backward`] walks it once in
//! reverse.

use super::Tensor;
use crate::error::{ensure, invalid, Result};
use crate::rf::ValidInterval;
use crate::scalar::{axpy, dot, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        active: Option<Vec<ValidInterval>>,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    MaskedMean {
        input: Var,
        valid: Vec<ValidInterval>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Unary {
        input: Var,
        act: Activation,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    RowSelect {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        valid: Vec<ValidInterval>,
        mean: Vec<S>,
        rstd: Vec<S>,
        batch_stats: bool,
    },
    Timeline {
        table: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
        weight_sum: S,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased variance over the valid frames.
    pub var: Vec<S>,
    /// Number of valid frames per channel.
    pub count: usize,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize, usize) {
    // (batch, channels, trailing size) for tensors of rank >= 2
    let b = shape[0];
    let c = shape[1];
    let r = shape[2..].iter().product();
    (b, c, r)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Cross-correlation of `[B, C_in, T]` with `[C_out, C_in, K]`, zero
    /// padded by `padding` frames on each side.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        self.conv1d_within(input, kernel, bias, padding, None)
    }

    /// [`Tape::conv1d`] evaluated only on the output frames of `active[b]`;
    /// every other output frame is zero and passes no gradient.
    pub fn conv1d_within(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
        active: Option<&[ValidInterval]>,
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        ensure!(is.len() == 3, "conv1d input must be [B, C, T], got {is:?}");
        ensure!(ks.len() == 3, "conv1d kernel must be [C_out, C_in, K], got {ks:?}");
        let (b, cin, t) = (is[0], is[1], is[2]);
        let (cout, kcin, k) = (ks[0], ks[1], ks[2]);
        ensure!(cin == kcin, "conv1d channel mismatch: input {cin}, kernel {kcin}");
        ensure!(k >= 1, "conv1d kernel must be non-empty");
        ensure!(
            t + 2 * padding >= k,
            "conv1d input of {t} frames (padding {padding}) shorter than kernel {k}"
        );
        if let Some(bv) = bias {
            ensure!(
                self.shape(bv) == [cout],
                "conv1d bias must be [{cout}], got {:?}",
                self.shape(bv)
            );
        }
        let tout = t + 2 * padding - k + 1;
        if let Some(a) = active {
            ensure!(a.len() == b, "conv1d needs {b} active intervals, got {}", a.len());
            for v in a {
                ensure!(v.end <= tout, "active interval {v:?} exceeds {tout} output frames");
            }
        }
        let x = self.data(input);
        let w = self.data(kernel);
        let mut out = vec![S::zero(); b * cout * tout];
        for bi in 0..b {
            let (s0, s1) = span(active, bi, tout);
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * tout..][..tout];
                if let Some(bv) = bias {
                    orow[s0..s1].fill(self.nodes[bv.0].value.data()[o]);
                }
                for i in 0..cin {
                    let irow = &x[(bi * cin + i) * t..][..t];
                    for kk in 0..k {
                        let (lo, hi) = conv_range(t, tout, padding, kk);
                        let (lo, hi) = (lo.max(s0), hi.min(s1));
                        if lo < hi {
                            let wv = w[(o * cin + i) * k + kk];
                            let off = kk + lo - padding;
                            axpy(wv, &irow[off..off + hi - lo], &mut orow[lo..hi]);
                        }
                    }
                }
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        let value = Tensor::new(vec![b, cout, tout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                padding,
                active: active.map(<[ValidInterval]>::to_vec),
            },
            rg,
        ))
    }

    pub fn max_pool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let is = self.shape(input).to_vec();
        ensure!(is.len() == 3, "max_pool1d input must be [B, C, T], got {is:?}");
        ensure!(window >= 1 && stride >= 1, "pool window and stride must be >= 1");
        let (b, c, t) = (is[0], is[1], is[2]);
        ensure!(t >= window, "max_pool1d input of {t} frames shorter than window {window}");
        let tout = (t - window) / stride + 1;
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c * tout);
        let mut argmax = Vec::with_capacity(b * c * tout);
        for row in 0..b * c {
            let base = row * t;
            let xr = &x[base..base + t];
            for j in 0..tout {
                let s = j * stride;
                let mut best = s;
                for q in s + 1..s + window {
                    if xr[q] > xr[best] {
                        best = q;
                    }
                }
                out.push(xr[best]);
                argmax.push(base + best);
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![b, c, tout], out)?,
            Op::MaxPool1d { input, argmax },
            rg,
        ))
    }

    /// Per-sample, per-channel mean over the frames of `valid[b]`.
    pub fn masked_mean(&mut self, input: Var, valid: &[ValidInterval]) -> Result<Var> {
        let is = self.shape(input).to_vec();
        ensure!(is.len() == 3, "masked_mean input must be [B, C, T], got {is:?}");
        let (b, c, t) = (is[0], is[1], is[2]);
        ensure!(valid.len() == b, "masked_mean needs {b} intervals, got {}", valid.len());
        for (i, v) in valid.iter().enumerate() {
            ensure!(!v.is_empty(), "sample {i} has an empty valid interval");
            ensure!(v.end <= t, "sample {i} interval {v:?} exceeds {t} frames");
        }
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * c);
        for (bi, v) in valid.iter().enumerate() {
            let n = S::of_usize(v.len());
            for ci in 0..c {
                let row = &x[(bi * c + ci) * t..][..t];
                let s: S = row[v.range()].iter().copied().sum();
                out.push(s / n);
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![b, c], out)?,
            Op::MaskedMean {
                input,
                valid: valid.to_vec(),
            },
            rg,
        ))
    }

    /// `input [B, F_in] · weightᵀ [F_in, F_out] + bias`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        ensure!(is.len() == 2, "affine input must be [B, F], got {is:?}");
        ensure!(ws.len() == 2, "affine weight must be [F_out, F_in], got {ws:?}");
        ensure!(
            is[1] == ws[1],
            "affine feature mismatch: input {}, weight {}",
            is[1],
            ws[1]
        );
        let (b, fin, fout) = (is[0], is[1], ws[0]);
        if let Some(bv) = bias {
            ensure!(self.shape(bv) == [fout], "affine bias must be [{fout}]");
        }
        let x = self.data(input);
        let w = self.data(weight);
        let bias_data = bias.map(|bv| self.data(bv));
        let mut out = Vec::with_capacity(b * fout);
        for bi in 0..b {
            let xr = &x[bi * fin..][..fin];
            for o in 0..fout {
                let mut v = dot(xr, &w[o * fin..][..fin]);
                if let Some(bd) = bias_data {
                    v += bd[o];
                }
                out.push(v);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(vec![b, fout], out)?,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Var {
        let x = self.data(input);
        let out: Vec<S> = match act {
            Activation::Relu => x.iter().map(|&v| v.max(S::zero())).collect(),
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
        };
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Unary { input, act },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        ensure!(
            self.shape(a) == self.shape(b),
            "elementwise shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: S = self.data(input).iter().copied().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat needs at least one input");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(first.len() >= 2, "concat inputs must have rank >= 2");
        let (b, _, r) = rows_of(&first);
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s[0] == b && s[2..] == first[2..],
                "concat shape mismatch: {first:?} vs {s:?}"
            );
            total += s[1];
        }
        let mut out = Vec::with_capacity(b * total * r);
        for bi in 0..b {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[bi * c * r..][..c * r]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(inputs.to_vec()), rg))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        ensure!(s.len() >= 2, "narrow input must have rank >= 2");
        ensure!(start + len <= s[1], "narrow [{start}, {}) exceeds {}", start + len, s[1]);
        let (b, c, r) = rows_of(&s);
        let x = self.data(input);
        let mut out = Vec::with_capacity(b * len * r);
        for bi in 0..b {
            out.extend_from_slice(&x[(bi * c + start) * r..][..len * r]);
        }
        let mut shape = s;
        shape[1] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { input, start }, rg))
    }

    /// Row `i` of the output is row `i` of `a` where `mask[i]`, else of `b`.
    pub fn row_select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(s == self.shape(b), "row_select shape mismatch");
        ensure!(!s.is_empty() && mask.len() == s[0], "row_select mask length mismatch");
        let r = self.value(a).len() / s[0];
        let mut out = Vec::with_capacity(self.value(a).len());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { self.data(a) } else { self.data(b) };
            out.extend_from_slice(&src[i * r..][..r]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::RowSelect {
                mask: mask.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    /// Batch normalisation over `[B, C, T]` whose statistics use only the
    /// frames inside each sample's valid interval. With `running = None` the
    /// batch statistics are used (training) and returned; otherwise the given
    /// `(mean, var)` are used as constants (inference). Frames outside the
    /// valid intervals are set to zero and receive no gradient.
    pub fn masked_batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        valid: &[ValidInterval],
        running: Option<(&[S], &[S])>,
        eps: S,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let is = self.shape(input).to_vec();
        ensure!(is.len() == 3, "batch norm input must be [B, C, T], got {is:?}");
        let (b, c, t) = (is[0], is[1], is[2]);
        ensure!(valid.len() == b, "batch norm needs {b} intervals, got {}", valid.len());
        ensure!(
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            "batch norm scale/shift must be [{c}]"
        );
        for v in valid {
            ensure!(v.end <= t, "interval {v:?} exceeds {t} frames");
        }
        let x = self.data(input);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                ensure!(m.len() == c && v.len() == c, "running stats must have {c} entries");
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let count: usize = valid.iter().map(|v| v.len()).sum();
                ensure!(count > 0, "batch norm in training mode needs at least one valid frame");
                let n = S::of_usize(count);
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ci in 0..c {
                    let mut s = S::zero();
                    for (bi, v) in valid.iter().enumerate() {
                        s += x[(bi * c + ci) * t..][v.range()].iter().copied().sum::<S>();
                    }
                    let mu = s / n;
                    let mut q = S::zero();
                    for (bi, v) in valid.iter().enumerate() {
                        for &xv in &x[(bi * c + ci) * t..][v.range()] {
                            let d = xv - mu;
                            q += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = q / n;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![S::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = g[ci] * rstd[ci];
                let shift = bt[ci] - mean[ci] * scale;
                let r = valid[bi].range();
                let src = &x[(bi * c + ci) * t..][r.clone()];
                let dst = &mut out[(bi * c + ci) * t..][r];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * scale + shift;
                }
            }
        }
        let batch_stats = stats.is_some();
        let rg = self.rg(&[input, gamma, beta]);
        let var_out = self.push(
            Tensor::new(is, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                valid: valid.to_vec(),
                mean,
                rstd,
                batch_stats,
            },
            rg,
        );
        Ok((var_out, stats))
    }

    /// Expands a `[C, P]` table to `[batch, C, frames]`; frame `f` reads
    /// column `f` (or `f mod P` when `cyclic`).
    pub fn timeline(&mut self, table: Var, batch: usize, frames: usize, cyclic: bool) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        ensure!(ts.len() == 2, "timeline table must be [C, P], got {ts:?}");
        let (c, p) = (ts[0], ts[1]);
        ensure!(p >= 1, "timeline table has no columns");
        ensure!(
            cyclic || frames <= p,
            "{frames} frames exceed the {p} encoded timestamps"
        );
        let e = self.data(table);
        let mut row = vec![S::zero(); c * frames];
        for ci in 0..c {
            for f in 0..frames {
                row[ci * frames + f] = e[ci * p + f % p];
            }
        }
        let mut out = Vec::with_capacity(batch * c * frames);
        for _ in 0..batch {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![batch, c, frames], out)?,
            Op::Timeline { table },
            rg,
        ))
    }

    /// Weighted mean of `-log softmax(logits)[label]`, normalised by the sum
    /// of the weights.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: &[S],
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        ensure!(ls.len() == 2, "logits must be [B, N], got {ls:?}");
        let (b, n) = (ls[0], ls[1]);
        ensure!(labels.len() == b && weights.len() == b, "need {b} labels and weights");
        for (&y, &w) in labels.iter().zip(weights) {
            ensure!(y < n, "label {y} out of range for {n} classes");
            ensure!(w >= S::zero(), "sample weights must be non-negative");
        }
        let z = self.data(logits);
        let probs = softmax_rows(z, n);
        let mut total = S::zero();
        let mut weight_sum = S::zero();
        for bi in 0..b {
            let row = &z[bi * n..][..n];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            total += weights[bi] * (lse - row[labels[bi]]);
            weight_sum += weights[bi];
        }
        let loss = if weight_sum > S::zero() {
            total / weight_sum
        } else {
            S::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        ensure!(
            self.value(root).len() == 1,
            "backward needs a scalar root, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
                padding,
                active,
            } => {
                let active = active.as_deref();
                let is = self.shape(*input);
                let ks = self.shape(*kernel);
                let (b, cin, t) = (is[0], is[1], is[2]);
                let (cout, k) = (ks[0], ks[2]);
                let tout = out_shape[2];
                let x = self.data(*input);
                let w = self.data(*kernel);
                let pad = *padding;
                if self.requires_grad(*input) {
                    let mut gi = vec![S::zero(); x.len()];
                    for bi in 0..b {
                        let (s0, s1) = span(active, bi, tout);
                        for o in 0..cout {
                            let grow = &g[(bi * cout + o) * tout..][..tout];
                            for i in 0..cin {
                                let girow = &mut gi[(bi * cin + i) * t..][..t];
                                for kk in 0..k {
                                    let (lo, hi) = conv_range(t, tout, pad, kk);
                                    let (lo, hi) = (lo.max(s0), hi.min(s1));
                                    if lo < hi {
                                        let off = kk + lo - pad;
                                        axpy(
                                            w[(o * cin + i) * k + kk],
                                            &grow[lo..hi],
                                            &mut girow[off..off + hi - lo],
                                        );
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *input, &gi);
                }
                if self.requires_grad(*kernel) {
                    let mut gk = vec![S::zero(); w.len()];
                    for bi in 0..b {
                        let (s0, s1) = span(active, bi, tout);
                        for o in 0..cout {
                            let grow = &g[(bi * cout + o) * tout..][..tout];
                            for i in 0..cin {
                                let irow = &x[(bi * cin + i) * t..][..t];
                                for kk in 0..k {
                                    let (lo, hi) = conv_range(t, tout, pad, kk);
                                    let (lo, hi) = (lo.max(s0), hi.min(s1));
                                    if lo < hi {
                                        let off = kk + lo - pad;
                                        gk[(o * cin + i) * k + kk] +=
                                            dot(&grow[lo..hi], &irow[off..off + hi - lo]);
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *kernel, &gk);
                }
                if let Some(bv) = bias.filter(|bv| self.requires_grad(*bv)) {
                    let mut gb = vec![S::zero(); cout];
                    for bi in 0..b {
                        let (s0, s1) = span(active, bi, tout);
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += g[(bi * cout + o) * tout..][s0..s1].iter().copied().sum::<S>();
                        }
                    }
                    accumulate(grads, bv, &gb);
                }
            }
            Op::MaxPool1d { input, argmax } => {
                let mut gi = vec![S::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
                accumulate(grads, *input, &gi);
            }
            Op::MaskedMean { input, valid } => {
                let is = self.shape(*input);
                let (c, t) = (is[1], is[2]);
                let mut gi = vec![S::zero(); self.value(*input).len()];
                for (bi, v) in valid.iter().enumerate() {
                    let n = S::of_usize(v.len());
                    for ci in 0..c {
                        let gv = g[bi * c + ci] / n;
                        gi[(bi * c + ci) * t..][v.range()].fill(gv);
                    }
                }
                accumulate(grads, *input, &gi);
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let is = self.shape(*input);
                let (b, fin) = (is[0], is[1]);
                let fout = out_shape[1];
                let x = self.data(*input);
                let w = self.data(*weight);
                if self.requires_grad(*input) {
                    let mut gi = vec![S::zero(); x.len()];
                    for bi in 0..b {
                        for o in 0..fout {
                            axpy(g[bi * fout + o], &w[o * fin..][..fin], &mut gi[bi * fin..][..fin]);
                        }
                    }
                    accumulate(grads, *input, &gi);
                }
                if self.requires_grad(*weight) {
                    let mut gw = vec![S::zero(); w.len()];
                    for bi in 0..b {
                        for o in 0..fout {
                            axpy(g[bi * fout + o], &x[bi * fin..][..fin], &mut gw[o * fin..][..fin]);
                        }
                    }
                    accumulate(grads, *weight, &gw);
                }
                if let Some(bv) = bias.filter(|bv| self.requires_grad(*bv)) {
                    let mut gb = vec![S::zero(); fout];
                    for bi in 0..b {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += g[bi * fout + o];
                        }
                    }
                    accumulate(grads, bv, &gb);
                }
            }
            Op::Unary { input, act } => {
                let y = node.value.data();
                let gi: Vec<S> = match act {
                    Activation::Relu => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| if yv > S::zero() { gv } else { S::zero() })
                        .collect(),
                    Activation::Sigmoid => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * yv * (S::one() - yv))
                        .collect(),
                    Activation::Tanh => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * (S::one() - yv * yv))
                        .collect(),
                };
                accumulate(grads, *input, &gi);
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let gi: Vec<S> = g.iter().zip(self.data(*b)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, &gi);
                }
                if self.requires_grad(*b) {
                    let gi: Vec<S> = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, &gi);
                }
            }
            Op::Sum(input) => {
                let gi = vec![g[0]; self.value(*input).len()];
                accumulate(grads, *input, &gi);
            }
            Op::Concat(inputs) => {
                let (b, total, r) = rows_of(out_shape);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut gi = Vec::with_capacity(b * c * r);
                        for bi in 0..b {
                            gi.extend_from_slice(&g[(bi * total + offset) * r..][..c * r]);
                        }
                        accumulate(grads, v, &gi);
                    }
                    offset += c;
                }
            }
            Op::Narrow { input, start } => {
                let (b, c, r) = rows_of(self.shape(*input));
                let len = out_shape[1];
                let mut gi = vec![S::zero(); b * c * r];
                for bi in 0..b {
                    gi[(bi * c + start) * r..][..len * r].copy_from_slice(&g[bi * len * r..][..len * r]);
                }
                accumulate(grads, *input, &gi);
            }
            Op::RowSelect { mask, a, b } => {
                let r = g.len() / mask.len();
                let zero = vec![S::zero(); g.len()];
                let mut ga = zero.clone();
                let mut gb = zero;
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut ga } else { &mut gb };
                    dst[i * r..][..r].copy_from_slice(&g[i * r..][..r]);
                }
                if self.requires_grad(*a) {
                    accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                valid,
                mean,
                rstd,
                batch_stats,
            } => {
                let (c, t) = (out_shape[1], out_shape[2]);
                let x = self.data(*input);
                let gm = self.data(*gamma);
                let count: usize = valid.iter().map(|v| v.len()).sum();
                let mut gg = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                let mut gi = vec![S::zero(); x.len()];
                for ci in 0..c {
                    let (mu, r) = (mean[ci], rstd[ci]);
                    let mut sum_h = S::zero();
                    let mut sum_hd = S::zero();
                    for (bi, v) in valid.iter().enumerate() {
                        let base = (bi * c + ci) * t;
                        for f in v.range() {
                            let gv = g[base + f];
                            let d = x[base + f] - mu;
                            gg[ci] += gv * d * r;
                            gbeta[ci] += gv;
                            let h = gv * gm[ci];
                            sum_h += h;
                            sum_hd += h * d;
                            gi[base + f] = h * r;
                        }
                    }
                    if *batch_stats {
                        let n = S::of_usize(count);
                        let d_mean = -r * sum_h;
                        let half = S::from_f64_lossy(0.5);
                        let d_var = -half * r * r * r * sum_hd;
                        let two = S::from_f64_lossy(2.0);
                        for (bi, v) in valid.iter().enumerate() {
                            let base = (bi * c + ci) * t;
                            for f in v.range() {
                                gi[base + f] += d_mean / n + two * (x[base + f] - mu) * d_var / n;
                            }
                        }
                    }
                }
                if self.requires_grad(*input) {
                    accumulate(grads, *input, &gi);
                }
                if self.requires_grad(*gamma) {
                    accumulate(grads, *gamma, &gg);
                }
                if self.requires_grad(*beta) {
                    accumulate(grads, *beta, &gbeta);
                }
            }
            Op::Timeline { table } => {
                let (b, c, frames) = (out_shape[0], out_shape[1], out_shape[2]);
                let p = self.shape(*table)[1];
                let mut gt = vec![S::zero(); c * p];
                for bi in 0..b {
                    for ci in 0..c {
                        let grow = &g[(bi * c + ci) * frames..][..frames];
                        for (f, &gv) in grow.iter().enumerate() {
                            gt[ci * p + f % p] += gv;
                        }
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                weights,
                probs,
                weight_sum,
            } => {
                let n = self.shape(*logits)[1];
                let mut gi = vec![S::zero(); probs.len()];
                if *weight_sum > S::zero() {
                    for (bi, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        let scale = g[0] * w / *weight_sum;
                        for j in 0..n {
                            let ind = if j == y { S::one() } else { S::zero() };
                            gi[bi * n + j] = scale * (probs[bi * n + j] - ind);
                        }
                    }
                }
                accumulate(grads, *logits, &gi);
            }
        }
        Ok(())
    }
}

/// Output frames `[lo, hi)` for which kernel tap `kk` reads inside the input.
#[inline]
/// Output frames computed for sample `bi`.
fn span(active: Option<&[ValidInterval]>, bi: usize, tout: usize) -> (usize, usize) {
    active.map_or((0, tout), |a| (a[bi].start, a[bi].end))
}

fn conv_range(t: usize, tout: usize, pad: usize, kk: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = if t + pad >= kk { (t + pad - kk).min(tout) } else { 0 };
    (lo, hi.max(lo))
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: &[S]) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
        None => grads[v.0] = Some(g.to_vec()),
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// Row-wise softmax of a `[B, n]` buffer with max subtraction.
pub(crate) fn softmax_rows<S: Scalar>(z: &[S], n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks_exact(n) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: S = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

impl<S: Scalar> Tape<S> {
    /// Checks that every node touched by a backward pass from `root` with
    /// `requires_grad` received a gradient.
    pub fn all_reachable_have_grads(&self, root: Var, grads: &Gradients<S>) -> bool {
        let mut reach = vec![false; self.nodes.len()];
        reach[root.0] = true;
        for i in (0..=root.0).rev() {
            if !reach[i] || !self.nodes[i].requires_grad {
                continue;
            }
            for dep in self.inputs(i) {
                if self.nodes[dep.0].requires_grad {
                    reach[dep.0] = true;
                }
            }
        }
        reach
            .iter()
            .enumerate()
            .all(|(i, &r)| !r || !self.nodes[i].requires_grad || grads.grads[i].is_some())
    }

    fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv1d {
                input, kernel, bias, ..
            } => [Some(*input), Some(*kernel), *bias].into_iter().flatten().collect(),
            Op::MaxPool1d { input, .. }
            | Op::MaskedMean { input, .. }
            | Op::Unary { input, .. }
            | Op::Narrow { input, .. }
            | Op::Sum(input) => vec![*input],
            Op::Affine {
                input, weight, bias, ..
            } => [Some(*input), Some(*weight), *bias].into_iter().flatten().collect(),
            Op::Add(a, b) | Op::Mul(a, b) | Op::RowSelect { a, b, .. } => vec![*a, *b],
            Op::Concat(v) => v.clone(),
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Timeline { table } => vec![*table],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
        }
    }

    /// Convenience for tests and small programs: the value of a scalar node.
    pub fn scalar(&self, v: Var) -> Result<S> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(invalid!("node {} is not a scalar: {:?}", v.0, t.shape()));
        }
        Ok(t.data()[0])
    }
}
