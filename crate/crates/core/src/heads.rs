//! Pooling heads turning per-block feature maps into a fixed-size vector.
//!
//! * `gap`: masked GAP of the last block.
//! * `multi_scale`: concatenation of every block's pooled projection.
//! * `adaptive_scale`: pooled projection of the deepest block whose receptive
//!   field fits in the sample.
//! * `adaptive_multi_scale`: the pooled projections of all blocks that fit,
//!   from shallow to deep, aggregated by an LSTM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::layers::{masked_gap, Linear, RecurrentAggregator};
use crate::params::{Forward, ParamStore};
use crate::rf::{surviving_blocks, ValidInterval};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Gap,
    MultiScale,
    AdaptiveScale,
    AdaptiveMultiScale,
}

impl HeadVariant {
    /// Whether the receptive field used adapts to the sample length.
    pub fn adaptive_rf(self) -> bool {
        matches!(self, Self::AdaptiveScale | Self::AdaptiveMultiScale)
    }

    /// Whether one prediction mixes features of several receptive fields.
    pub fn multi_scale(self) -> bool {
        matches!(self, Self::MultiScale | Self::AdaptiveMultiScale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    #[serde(default = "default_width")]
    pub projection_channels: usize,
    #[serde(default = "default_true")]
    pub include_input_level: bool,
    #[serde(default = "default_width")]
    pub recurrent_hidden: usize,
}

fn default_width() -> usize {
    64
}

fn default_true() -> bool {
    true
}

impl HeadConfig {
    pub fn new(variant: HeadVariant) -> Self {
        Self {
            variant,
            projection_channels: 64,
            include_input_level: true,
            recurrent_hidden: 64,
        }
    }

    /// Whether the head consumes the (possibly encoded) input as `z_0`.
    pub fn uses_input_level(&self) -> bool {
        self.variant != HeadVariant::Gap && self.include_input_level
    }
}

/// Ordered pooled features `z_l` with the number each sample may use.
#[derive(Debug, Clone)]
pub struct MultiScaleSequence {
    pub items: Vec<Var>,
    pub lengths: Vec<usize>,
}

/// Pointwise projection followed by masked GAP. Both are linear along the
/// time axis, so the mean is taken first and the projection applied to the
/// `[B, C]` result; this equals projecting every frame and then pooling.
pub fn project_and_pool<S: Scalar>(
    f: &mut Forward<S>,
    feature: Var,
    projection: &Linear,
    valid: &[ValidInterval],
) -> Result<Var> {
    let pooled = masked_gap(f, feature, valid)?;
    projection.forward(f, pooled)
}

/// Keeps, for each sample, `z_0` (when present) and every `z_l` with
/// `rf_l <= T`, in ascending `l`.
pub fn build_sequence(
    items: Vec<Var>,
    block_rfs: &[usize],
    lengths: &[usize],
    include_input_level: bool,
) -> Result<MultiScaleSequence> {
    ensure!(
        items.len() == block_rfs.len() + include_input_level as usize,
        "{} pooled features for {} blocks",
        items.len(),
        block_rfs.len()
    );
    let counts: Vec<usize> = lengths
        .iter()
        .map(|&t| include_input_level as usize + surviving_blocks(block_rfs, t))
        .collect();
    if let Some((i, t)) = counts
        .iter()
        .zip(lengths)
        .enumerate()
        .find(|(_, (c, _))| **c == 0)
        .map(|(i, (_, t))| (i, *t))
    {
        return Err(crate::error::invalid!(
            "sample {i} of length {t} is shorter than every receptive field; enable the input-level feature"
        ));
    }
    Ok(MultiScaleSequence {
        items,
        lengths: counts,
    })
}

/// Feature maps handed to a head.
pub struct HeadInputs {
    /// The (encoded) input `f_0` with its intervals, if the head uses it.
    pub input_level: Option<(Var, Vec<ValidInterval>)>,
    pub blocks: Vec<(Var, Vec<ValidInterval>)>,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    /// Projection for `z_0` first (when used), then one per block.
    pub projections: Vec<Linear>,
    pub recurrent: Option<RecurrentAggregator>,
    pub out_features: usize,
}

impl Head {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &HeadConfig,
        input_channels: usize,
        block_channels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(!block_channels.is_empty(), "head needs at least one block");
        let p = config.projection_channels;
        let mut projections = Vec::new();
        if config.variant != HeadVariant::Gap {
            ensure!(p >= 1, "projection width must be >= 1");
            if config.include_input_level {
                projections.push(Linear::new(store, "head.proj0", input_channels, p, rng));
            }
            for (l, &c) in block_channels.iter().enumerate() {
                projections.push(Linear::new(store, &format!("head.proj{}", l + 1), c, p, rng));
            }
        }
        let levels = projections.len();
        let (recurrent, out_features) = match config.variant {
            HeadVariant::Gap => (None, *block_channels.last().unwrap()),
            HeadVariant::MultiScale => (None, p * levels),
            HeadVariant::AdaptiveScale => (None, p),
            HeadVariant::AdaptiveMultiScale => {
                let h = config.recurrent_hidden;
                (Some(RecurrentAggregator::new(store, "head.lstm", p, h, rng)), h)
            }
        };
        Ok(Self {
            config: config.clone(),
            projections,
            recurrent,
            out_features,
        })
    }

    /// Produces `z_f: [B, out_features]`. `lengths` are the per-sample input
    /// lengths used for truncation.
    pub fn forward<S: Scalar>(
        &self,
        f: &mut Forward<S>,
        inputs: &HeadInputs,
        block_rfs: &[usize],
        lengths: &[usize],
    ) -> Result<Var> {
        ensure!(inputs.blocks.len() == block_rfs.len(), "one receptive field per block");
        if self.config.variant == HeadVariant::Gap {
            let (last, valid) = inputs.blocks.last().expect("at least one block");
            return masked_gap(f, *last, valid);
        }
        let mut maps: Vec<(Var, &[ValidInterval])> = Vec::new();
        if self.config.include_input_level {
            let (x, v) = inputs
                .input_level
                .as_ref()
                .ok_or_else(|| crate::error::invalid!("head expects the input-level feature"))?;
            maps.push((*x, v));
        }
        maps.extend(inputs.blocks.iter().map(|(x, v)| (*x, v.as_slice())));
        let mut z = Vec::with_capacity(maps.len());
        for ((x, v), proj) in maps.into_iter().zip(&self.projections) {
            z.push(project_and_pool(f, x, proj, v)?);
        }
        match self.config.variant {
            HeadVariant::Gap => unreachable!(),
            HeadVariant::MultiScale => f.tape.concat(&z),
            HeadVariant::AdaptiveScale => {
                let seq = build_sequence(z, block_rfs, lengths, self.config.include_input_level)?;
                let mut out = seq.items[0];
                for (s, &item) in seq.items.iter().enumerate().skip(1) {
                    let mask: Vec<bool> = seq.lengths.iter().map(|&n| s < n).collect();
                    if mask.iter().any(|&m| m) {
                        out = f.tape.row_select(&mask, item, out)?;
                    }
                }
                Ok(out)
            }
            HeadVariant::AdaptiveMultiScale => {
                let seq = build_sequence(z, block_rfs, lengths, self.config.include_input_level)?;
                self.recurrent
                    .as_ref()
                    .expect("adaptive multi-scale head owns a recurrent aggregator")
                    .aggregate(f, &seq.items, &seq.lengths)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BASE_RFS: [usize; 6] = [8, 22, 62, 142, 334, 974];

    #[test]
    fn sequence_lengths_follow_truncation() {
        let items: Vec<Var> = {
            let mut tape = crate::tensor::Tape::<f64>::new();
            (0..7).map(|_| tape.constant(Tensor::zeros(&[3, 1]))).collect()
        };
        let seq = build_sequence(items.clone(), &BASE_RFS, &[100, 980, 5], true).unwrap();
        assert_eq!(seq.lengths, vec![4, 7, 1]);
        assert!(build_sequence(items[1..].to_vec(), &BASE_RFS, &[5], false).is_err());
    }

    #[test]
    fn projection_of_constant_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let proj = Linear::new(&mut store, "p", 2, 2, &mut rng);
        store.get_mut(proj.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.get_mut(proj.bias).data_mut().fill(0.0);
        let mut f = Forward::new(&store, Mode::Eval);
        let mut data = vec![3.0; 2 * 10];
        data[0] = 1e6; // outside the interval
        let x = f.tape.constant(Tensor::new(vec![1, 2, 10], data).unwrap());
        let z = project_and_pool(&mut f, x, &proj, &[ValidInterval::new(2, 8)]).unwrap();
        assert_eq!(f.tape.value(z).data(), &[3.0, 3.0]);
    }

    #[test]
    fn zero_projection_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let proj = Linear::new(&mut store, "p", 3, 2, &mut rng);
        store.get_mut(proj.weight).data_mut().fill(0.0);
        store.get_mut(proj.bias).data_mut().copy_from_slice(&[0.25, -4.0]);
        let mut f = Forward::new(&store, Mode::Eval);
        let x = f.tape.constant(Tensor::from_fn(&[1, 3, 6], |i| i as f64));
        let z = project_and_pool(&mut f, x, &proj, &[ValidInterval::full(6)]).unwrap();
        assert_eq!(f.tape.value(z).data(), &[0.25, -4.0]);
    }

    #[test]
    fn variant_table() {
        use HeadVariant::*;
        let rows: Vec<(bool, bool)> = [Gap, MultiScale, AdaptiveScale, AdaptiveMultiScale]
            .iter()
            .map(|v| (v.adaptive_rf(), v.multi_scale()))
            .collect();
        assert_eq!(rows, vec![(false, false), (false, true), (true, false), (true, true)]);
    }
}
