//! Valid-region aware building blocks: convolutions, masked batch norm,
//! residual conv blocks and the recurrent aggregator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::params::{Forward, ParamId, ParamStore, StatUpdate};
use crate::rf::{clamp_nonempty, propagate_valid, LayerGeom, LayerKind, ValidInterval};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Propagates each sample's interval through `geom` and applies the length-1
/// fallback against the output extent.
pub fn propagate_batch(valid: &[ValidInterval], geom: LayerGeom, extent: usize) -> Vec<ValidInterval> {
    valid
        .iter()
        .map(|&v| clamp_nonempty(propagate_valid(v, geom), extent))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_channels * kernel) as f64).sqrt();
        let weight = store.uniform(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel],
            bound,
            rng,
        );
        let bias = store.uniform(format!("{name}.bias"), &[out_channels], bound, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn geom(&self) -> LayerGeom {
        LayerGeom::new(self.kernel, 1, self.padding)
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<S>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.conv1d(x, w, Some(b), self.padding)
    }

    /// Convolution evaluated only on the frames of `active`.
    pub fn forward_within<S: Scalar>(&self, f: &mut Forward<S>, x: Var, active: &[ValidInterval]) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.conv1d_within(x, w, Some(b), self.padding, Some(active))
    }
}

/// Batch normalisation whose statistics only see valid frames.
#[derive(Debug, Clone)]
pub struct MaskedBatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl MaskedBatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], S::one()),
                false,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
        let g = f.param(self.gamma);
        let b = f.param(self.beta);
        let eps = S::from_f64_lossy(self.eps);
        if f.is_training() {
            let (y, stats) = f.tape.masked_batch_norm(x, g, b, valid, None, eps)?;
            let stats = stats.expect("training mode returns batch statistics");
            f.stat_updates.push(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var,
                count: stats.count,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let params = f.params;
            let rm = params.get(self.running_mean).data();
            let rv = params.get(self.running_var).data();
            let (y, _) = f.tape.masked_batch_norm(x, g, b, valid, Some((rm, rv)), eps)?;
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        Self {
            weight: store.uniform(format!("{name}.weight"), &[out_features, in_features], bound, rng),
            bias: store.uniform(format!("{name}.bias"), &[out_features], bound, rng),
            in_features,
            out_features,
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Forward<S>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        f.tape.affine(x, w, Some(b))
    }
}

/// Description of one convolutional block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// Kernel size of each convolution in the block (stride 1, "same" padding).
    pub kernels: Vec<usize>,
    pub channels: usize,
    /// Max-pool window (= stride) applied at the end of the block.
    #[serde(default)]
    pub pool: Option<usize>,
    #[serde(default)]
    pub residual: bool,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl BlockSpec {
    pub fn plain(kernel: usize, channels: usize, pool: Option<usize>) -> Self {
        Self {
            kernels: vec![kernel],
            channels,
            pool,
            residual: false,
            batch_norm: true,
        }
    }

    pub fn residual(kernels: &[usize], channels: usize) -> Self {
        Self {
            kernels: kernels.to_vec(),
            channels,
            pool: None,
            residual: true,
            batch_norm: true,
        }
    }

    pub fn geoms(&self) -> Vec<(LayerKind, LayerGeom)> {
        let mut g: Vec<_> = self
            .kernels
            .iter()
            .map(|&k| (LayerKind::Conv, LayerGeom::same_conv(k)))
            .collect();
        if let Some(p) = self.pool {
            g.push((LayerKind::Pool, LayerGeom::pool(p)));
        }
        g
    }
}

#[derive(Debug, Clone)]
pub enum Shortcut {
    Identity,
    Projection(Conv1dLayer),
}

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub conv: Conv1dLayer,
    pub norm: Option<MaskedBatchNorm>,
}

/// conv → masked batch norm → ReLU (repeated), optional residual add before
/// the last ReLU, optional max pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub stages: Vec<ConvStage>,
    pub pool: Option<usize>,
    pub shortcut: Option<Shortcut>,
    pub activation: bool,
}

impl ConvBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: &BlockSpec,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(!spec.kernels.is_empty(), "block {name} has no convolutions");
        ensure!(spec.channels >= 1, "block {name} has zero channels");
        ensure!(
            spec.kernels.iter().all(|&k| k % 2 == 1),
            "block {name}: kernels must be odd for symmetric padding, got {:?}",
            spec.kernels
        );
        let mut stages = Vec::with_capacity(spec.kernels.len());
        let mut cin = in_channels;
        for (i, &k) in spec.kernels.iter().enumerate() {
            let conv = Conv1dLayer::new(store, &format!("{name}.conv{i}"), cin, spec.channels, k, k / 2, rng);
            let norm = spec
                .batch_norm
                .then(|| MaskedBatchNorm::new(store, &format!("{name}.bn{i}"), spec.channels));
            stages.push(ConvStage { conv, norm });
            cin = spec.channels;
        }
        let shortcut = spec.residual.then(|| {
            if in_channels == spec.channels {
                Shortcut::Identity
            } else {
                Shortcut::Projection(Conv1dLayer::new(
                    store,
                    &format!("{name}.shortcut"),
                    in_channels,
                    spec.channels,
                    1,
                    0,
                    rng,
                ))
            }
        });
        Ok(Self {
            stages,
            pool: spec.pool,
            shortcut,
            activation: true,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.conv.out_channels)
    }

    pub fn geoms(&self) -> Vec<(LayerKind, LayerGeom)> {
        let mut g: Vec<_> = self.stages.iter().map(|s| (LayerKind::Conv, s.conv.geom())).collect();
        if let Some(p) = self.pool {
            g.push((LayerKind::Pool, LayerGeom::pool(p)));
        }
        g
    }

    /// Runs the block and returns the output with the propagated (and
    /// length-1 clamped) valid intervals.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Forward<S>,
        x: Var,
        valid: &[ValidInterval],
    ) -> Result<(Var, Vec<ValidInterval>)> {
        let shape = f.tape.shape(x).to_vec();
        ensure!(shape.len() == 3, "block input must be [B, C, T], got {shape:?}");
        ensure!(valid.len() == shape[0], "need one interval per sample");
        for v in valid {
            ensure!(v.end <= shape[2], "interval {v:?} exceeds {} frames", shape[2]);
        }
        let mut h = x;
        let mut cur = valid.to_vec();
        let n = self.stages.len();
        for (i, stage) in self.stages.iter().enumerate() {
            let geom = stage.conv.geom();
            let t = f.tape.shape(h)[2];
            ensure!(t + 2 * geom.padding >= geom.kernel, "block input of {t} frames shorter than kernel {}", geom.kernel);
            cur = propagate_batch(&cur, geom, t + 2 * geom.padding - geom.kernel + 1);
            if let Some(bn) = &stage.norm {
                // masked batch norm zeroes every other frame anyway
                h = stage.conv.forward_within(f, h, &cur)?;
                h = bn.forward(f, h, &cur)?;
            } else {
                h = stage.conv.forward(f, h)?;
            }
            let last = i + 1 == n;
            if last {
                if let Some(sc) = &self.shortcut {
                    let s = match sc {
                        Shortcut::Identity => x,
                        Shortcut::Projection(conv) => conv.forward(f, x)?,
                    };
                    h = f.tape.add(h, s)?;
                }
            }
            if self.activation {
                h = f.tape.relu(h);
            }
            if stage.norm.is_none() || (last && matches!(self.shortcut, Some(Shortcut::Projection(_)))) {
                h = zero_outside(f, h, &cur)?;
            }
        }
        if let Some(p) = self.pool {
            let t = f.tape.shape(h)[2];
            ensure!(t >= p, "block input too short: {t} frames before a pool of {p}");
            h = f.tape.max_pool1d(h, p, p)?;
            let extent = f.tape.shape(h)[2];
            cur = propagate_batch(&cur, LayerGeom::pool(p), extent);
        }
        Ok((h, cur))
    }
}

/// Zeroes every frame outside the valid intervals (conv biases would
/// otherwise leak into the padding).
pub fn zero_outside<S: Scalar>(f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
    let shape = f.tape.shape(x).to_vec();
    let (c, t) = (shape[1], shape[2]);
    let mut mask = Tensor::zeros(&shape);
    for (b, v) in valid.iter().enumerate() {
        for ci in 0..c {
            mask.data_mut()[(b * c + ci) * t..][v.range()].fill(S::one());
        }
    }
    let m = f.tape.constant(mask);
    f.tape.mul(x, m)
}

/// Masked global average pooling over the time axis.
pub fn masked_gap<S: Scalar>(f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
    f.tape.masked_mean(x, valid)
}

/// Long short-term memory over a sequence of `[B, F]` features, returning the
/// final hidden state. Gate order in the stacked weights is input, forget,
/// cell candidate, output.
#[derive(Debug, Clone)]
pub struct RecurrentAggregator {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
    pub hidden: usize,
}

impl RecurrentAggregator {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let w_ih = store.uniform(format!("{name}.w_ih"), &[4 * hidden, input_size], bound, rng);
        let w_hh = store.uniform(format!("{name}.w_hh"), &[4 * hidden, hidden], bound, rng);
        let mut b = Tensor::from_fn(&[4 * hidden], |_| S::from_f64_lossy(rng.random_range(-bound..=bound)));
        // forget gate starts open
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = S::one();
        }
        let bias = store.add(format!("{name}.bias"), b, true);
        Self {
            w_ih,
            w_hh,
            bias,
            input_size,
            hidden,
        }
    }

    /// One cell update; returns `(h, c)`.
    pub fn step<S: Scalar>(&self, f: &mut Forward<S>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let w_ih = f.param(self.w_ih);
        let w_hh = f.param(self.w_hh);
        let bias = f.param(self.bias);
        let hs = self.hidden;
        let a = f.tape.affine(x, w_ih, Some(bias))?;
        let r = f.tape.affine(h, w_hh, None)?;
        let gates = f.tape.add(a, r)?;
        let i = f.tape.narrow(gates, 0, hs)?;
        let fg = f.tape.narrow(gates, hs, hs)?;
        let g = f.tape.narrow(gates, 2 * hs, hs)?;
        let o = f.tape.narrow(gates, 3 * hs, hs)?;
        let i = f.tape.sigmoid(i);
        let fg = f.tape.sigmoid(fg);
        let g = f.tape.tanh(g);
        let o = f.tape.sigmoid(o);
        let keep = f.tape.mul(fg, c)?;
        let write = f.tape.mul(i, g)?;
        let c_new = f.tape.add(keep, write)?;
        let tc = f.tape.tanh(c_new);
        let h_new = f.tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs the recurrence from a zero state. Sample `b` consumes only the
    /// first `lengths[b]` steps; afterwards its state is frozen.
    pub fn aggregate<S: Scalar>(&self, f: &mut Forward<S>, sequence: &[Var], lengths: &[usize]) -> Result<Var> {
        ensure!(!sequence.is_empty(), "recurrent aggregation of an empty sequence");
        let s0 = f.tape.shape(sequence[0]).to_vec();
        ensure!(s0.len() == 2, "sequence items must be [B, F], got {s0:?}");
        let b = s0[0];
        for &v in sequence {
            ensure!(
                f.tape.shape(v) == s0.as_slice(),
                "sequence items must share shape {s0:?}"
            );
        }
        ensure!(s0[1] == self.input_size, "feature size {} != {}", s0[1], self.input_size);
        ensure!(lengths.len() == b, "need {b} sequence lengths");
        ensure!(
            lengths.iter().all(|&l| l >= 1 && l <= sequence.len()),
            "sequence lengths must lie in [1, {}]",
            sequence.len()
        );
        let zero = f.tape.constant(Tensor::zeros(&[b, self.hidden]));
        let (mut h, mut c) = (zero, zero);
        for (step, &x) in sequence.iter().enumerate() {
            let active: Vec<bool> = lengths.iter().map(|&l| step < l).collect();
            if !active.iter().any(|&a| a) {
                break;
            }
            let (hn, cn) = self.step(f, x, h, c)?;
            if active.iter().all(|&a| a) {
                h = hn;
                c = cn;
            } else {
                h = f.tape.row_select(&active, hn, h)?;
                c = f.tape.row_select(&active, cn, c)?;
            }
        }
        Ok(h)
    }
}
