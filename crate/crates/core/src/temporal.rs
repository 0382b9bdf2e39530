//! Learnable timestamp encoding concatenated to the input as extra channels.
//!
//! Series are placed on a common time axis by zero-padding before and after,
//! so frame `f` of the padded input always corresponds to timestamp `f + 1`.
//! The encoding table holds one column per timestamp; column `f` is
//! concatenated beneath the data at frame `f` for every sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::rf::ValidInterval;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const TE_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct TemporalEncoding {
    /// `[channels, t_max]`
    pub table: ParamId,
    pub channels: usize,
    pub t_max: usize,
    pub cyclic: bool,
}

impl TemporalEncoding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        t_max: usize,
        cyclic: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, TE_INIT_STD).expect("valid std");
        let t = Tensor::from_fn(&[channels, t_max], |_| S::from_f64_lossy(normal.sample(rng)));
        Self {
            table: store.add(format!("{name}.table"), t, true),
            channels,
            t_max,
            cyclic,
        }
    }

    /// Concatenates the encoding beneath `x: [B, D, frames]`. Validity
    /// intervals are unchanged by this step.
    pub fn apply<S: Scalar>(&self, f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        ensure!(s.len() == 3, "input must be [B, D, T], got {s:?}");
        let (b, frames) = (s[0], s[2]);
        ensure!(valid.len() == b, "need one interval per sample");
        if !self.cyclic {
            for (i, v) in valid.iter().enumerate() {
                ensure!(
                    v.end <= self.t_max,
                    "sample {i} ends at timestamp {} beyond the {} encoded timestamps",
                    v.end,
                    self.t_max
                );
            }
        }
        let table = f.param(self.table);
        let e = f.tape.timeline(table, b, frames, self.cyclic)?;
        f.tape.concat(&[x, e])
    }
}

/// Places a `[D, T]` series starting at 1-based timestamp `t1` on a
/// `[D, t_max]` zero canvas. Returns the canvas and the data's frame range.
pub fn pad_preserving_position<S: Scalar>(
    x: &Tensor<S>,
    t1: usize,
    t_max: usize,
) -> Result<(Tensor<S>, ValidInterval)> {
    ensure!(x.rank() == 2, "series must be [D, T], got {:?}", x.shape());
    let (d, t) = (x.dim(0), x.dim(1));
    ensure!(t1 >= 1, "timestamps start at 1, got t1 = {t1}");
    ensure!(t >= 1, "series is empty");
    ensure!(
        t1 + t - 1 <= t_max,
        "series at t1 = {t1} with T = {t} overruns T_max = {t_max}"
    );
    let start = t1 - 1;
    let mut out = Tensor::zeros(&[d, t_max]);
    for c in 0..d {
        out.data_mut()[c * t_max + start..][..t].copy_from_slice(&x.data()[c * t..][..t]);
    }
    Ok((out, ValidInterval::new(start, start + t)))
}

/// Pearson correlation between the columns (timestamps) of a `[C, P]` table.
/// Entries involving a constant column are 0.
pub fn te_correlation<S: Scalar>(table: &Tensor<S>) -> Result<Tensor<f64>> {
    ensure!(table.rank() == 2, "table must be [C, P], got {:?}", table.shape());
    let (c, p) = (table.dim(0), table.dim(1));
    ensure!(c >= 2, "correlation needs at least 2 channels, got {c}");
    let e = table.data();
    let mut centred = vec![0.0f64; c * p];
    let mut norms = vec![0.0f64; p];
    for col in 0..p {
        let mean = (0..c).map(|r| e[r * p + col].as_f64()).sum::<f64>() / c as f64;
        let mut ss = 0.0;
        for r in 0..c {
            let d = e[r * p + col].as_f64() - mean;
            centred[col * c + r] = d;
            ss += d * d;
        }
        norms[col] = ss.sqrt();
    }
    let degenerate = norms.iter().filter(|&&n| n == 0.0).count();
    if degenerate > 0 {
        log::warn!("{degenerate} encoding columns have zero variance; their correlations are set to 0");
    }
    let mut out = vec![0.0f64; p * p];
    for i in 0..p {
        if norms[i] == 0.0 {
            continue;
        }
        out[i * p + i] = 1.0;
        for j in i + 1..p {
            if norms[j] == 0.0 {
                continue;
            }
            let a = &centred[i * c..][..c];
            let b = &centred[j * c..][..c];
            let r: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j]);
            let r = r.clamp(-1.0, 1.0);
            out[i * p + j] = r;
            out[j * p + i] = r;
        }
    }
    Tensor::new(vec![p, p], out)
}
