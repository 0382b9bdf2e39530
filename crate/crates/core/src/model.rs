//! Full classifiers: optional temporal encoding, convolutional backbone with
//! valid-interval threading, a pooling head and the output layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::heads::{Head, HeadConfig, HeadInputs, HeadVariant};
use crate::layers::{BlockSpec, ConvBlock, Linear};
use crate::params::{Forward, Mode, ParamStore};
use crate::rf::{surviving_blocks, RfReport, ValidInterval};
use crate::scalar::Scalar;
use crate::temporal::TemporalEncoding;
use crate::tensor::{Checkpoint, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeConfig {
    /// Defaults to the input channel count.
    #[serde(default)]
    pub channels: Option<usize>,
    pub t_max: usize,
    #[serde(default)]
    pub cyclic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthPolicy {
    /// Every series is resampled to `length` frames; timestamps are lost.
    FixedInterpolate { length: usize },
    /// Series keep their length and position on a zero-padded canvas.
    VariableMasked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub input_channels: usize,
    pub classes: usize,
    pub backbone: Vec<BlockSpec>,
    #[serde(default)]
    pub te: Option<TeConfig>,
    pub head: HeadConfig,
    pub length_policy: LengthPolicy,
    /// Width of the hidden classifier layer; `None` means a single affine map.
    #[serde(default)]
    pub classifier_hidden: Option<usize>,
}

pub const BASE_KERNELS: [usize; 6] = [7, 5, 5, 3, 3, 3];
pub const BASE_POOLS: [usize; 6] = [2, 4, 2, 4, 2, 4];
pub const BASE_CHANNELS: [usize; 6] = [32, 32, 64, 64, 64, 64];
pub const RESIDUAL_KERNELS: [usize; 3] = [9, 5, 3];
pub const RESIDUAL_CHANNELS: [usize; 3] = [64, 128, 128];

pub const PRESET_NAMES: [&str; 14] = [
    "basecnn",
    "basecnn-te",
    "basecnn-intp",
    "mscnn",
    "mscnn-te",
    "ascnn",
    "ascnn-te",
    "amscnn",
    "amscnn-te",
    "resnet",
    "resnet-vl",
    "resnet-te",
    "amsresnet",
    "amsresnet-te",
];

pub fn base_backbone(channels: &[usize]) -> Vec<BlockSpec> {
    BASE_KERNELS
        .iter()
        .zip(BASE_POOLS)
        .zip(channels)
        .map(|((&k, p), &c)| BlockSpec::plain(k, c, Some(p)))
        .collect()
}

pub fn residual_backbone(channels: &[usize]) -> Vec<BlockSpec> {
    channels
        .iter()
        .map(|&c| BlockSpec::residual(&RESIDUAL_KERNELS, c))
        .collect()
}

impl ModelConfig {
    /// Named architecture for `input_channels` inputs, `classes` classes and
    /// series of at most `t_max` frames.
    pub fn preset(name: &str, input_channels: usize, classes: usize, t_max: usize) -> Result<Self> {
        use HeadVariant::*;
        let (stem, te) = match name.strip_suffix("-te") {
            Some(s) => (s, true),
            None => (name, false),
        };
        let fixed = LengthPolicy::FixedInterpolate { length: t_max };
        let masked = LengthPolicy::VariableMasked;
        let (residual, variant, policy) = match (stem, te) {
            ("basecnn", _) => (false, Gap, masked),
            ("basecnn-intp", false) => (false, Gap, fixed),
            ("mscnn", _) => (false, MultiScale, masked),
            ("ascnn", _) => (false, AdaptiveScale, masked),
            ("amscnn", _) => (false, AdaptiveMultiScale, masked),
            ("resnet", false) => (true, Gap, fixed),
            ("resnet", true) | ("resnet-vl", false) => (true, Gap, masked),
            ("amsresnet", _) => (true, AdaptiveMultiScale, masked),
            _ => {
                return Err(invalid!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                ))
            }
        };
        let backbone = if residual {
            residual_backbone(&RESIDUAL_CHANNELS)
        } else {
            base_backbone(&BASE_CHANNELS)
        };
        let cfg = Self {
            name: name.to_string(),
            input_channels,
            classes,
            backbone,
            te: te.then_some(TeConfig {
                channels: None,
                t_max,
                cyclic: false,
            }),
            head: HeadConfig::new(variant),
            length_policy: policy,
            classifier_hidden: (!residual).then_some(64),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_channels >= 1, "input_channels must be >= 1");
        ensure!(self.classes >= 2, "need at least 2 classes, got {}", self.classes);
        ensure!(!self.backbone.is_empty(), "backbone has no blocks");
        if let Some(te) = &self.te {
            ensure!(
                matches!(self.length_policy, LengthPolicy::VariableMasked),
                "temporal encoding needs timestamps, which fixed_interpolate discards"
            );
            ensure!(te.t_max >= 1, "temporal encoding t_max must be >= 1");
            ensure!(te.channels != Some(0), "temporal encoding channels must be >= 1");
        }
        if let LengthPolicy::FixedInterpolate { length } = self.length_policy {
            ensure!(length >= 2, "interpolation length must be >= 2");
        }
        ensure!(self.classifier_hidden != Some(0), "classifier_hidden must be >= 1");
        Ok(())
    }

    pub fn te_channels(&self) -> usize {
        self.te
            .as_ref()
            .map_or(0, |t| t.channels.unwrap_or(self.input_channels))
    }

    pub fn rf_report(&self) -> RfReport {
        let geoms: Vec<_> = self.backbone.iter().map(BlockSpec::geoms).collect();
        RfReport::from_blocks(&geoms)
    }
}

/// Softmax output of a forward pass.
#[derive(Debug, Clone)]
pub struct PredictionOutput<S> {
    pub logits: Tensor<S>,
    pub probabilities: Tensor<S>,
    pub predicted: Vec<usize>,
}

impl<S: Scalar> PredictionOutput<S> {
    pub fn from_logits(logits: Tensor<S>) -> Self {
        let (b, n) = (logits.dim(0), logits.dim(1));
        let probs = crate::tensor::softmax_rows(logits.data(), n);
        let predicted = (0..b)
            .map(|i| {
                let row = &logits.data()[i * n..][..n];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        Self {
            probabilities: Tensor::new(vec![b, n], probs).expect("same shape as logits"),
            logits,
            predicted,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    te: Option<TemporalEncoding>,
    blocks: Vec<ConvBlock>,
    head: Head,
    classifier: Vec<Linear>,
    rf: RfReport,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    Model::new(cfg, seed)
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let te = cfg.te.as_ref().map(|t| {
            TemporalEncoding::new(&mut params, "te", cfg.te_channels(), t.t_max, t.cyclic, &mut rng)
        });
        let f0_channels = cfg.input_channels + cfg.te_channels();
        let mut blocks = Vec::with_capacity(cfg.backbone.len());
        let mut cin = f0_channels;
        for (i, spec) in cfg.backbone.iter().enumerate() {
            let block = ConvBlock::new(&mut params, &format!("block{}", i + 1), spec, cin, &mut rng)?;
            cin = block.out_channels();
            blocks.push(block);
        }
        let widths: Vec<usize> = blocks.iter().map(ConvBlock::out_channels).collect();
        let head = Head::new(&mut params, &cfg.head, f0_channels, &widths, &mut rng)?;
        let mut classifier = Vec::new();
        match cfg.classifier_hidden {
            Some(h) => {
                classifier.push(Linear::new(&mut params, "fc1", head.out_features, h, &mut rng));
                classifier.push(Linear::new(&mut params, "fc2", h, cfg.classes, &mut rng));
            }
            None => classifier.push(Linear::new(&mut params, "fc", head.out_features, cfg.classes, &mut rng)),
        }
        let geoms: Vec<_> = blocks.iter().map(ConvBlock::geoms).collect();
        Ok(Self {
            config: cfg.clone(),
            params,
            te,
            blocks,
            head,
            classifier,
            rf: RfReport::from_blocks(&geoms),
        })
    }

    pub fn rf_report(&self) -> &RfReport {
        &self.rf
    }

    pub fn block_rfs(&self) -> Vec<usize> {
        self.rf.block_rfs()
    }

    pub fn temporal_encoding(&self) -> Option<&TemporalEncoding> {
        self.te.as_ref()
    }

    /// Number of pooled features the adaptive heads see for a series of
    /// length `t` (including the input level when enabled).
    pub fn sequence_length(&self, t: usize) -> usize {
        self.config.head.uses_input_level() as usize + surviving_blocks(&self.block_rfs(), t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.params.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params.load_checkpoint(ck)
    }

    fn check_input(&self, f: &Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<()> {
        let s = f.tape.shape(x);
        ensure!(s.len() == 3, "input must be [B, D, T], got {s:?}");
        ensure!(
            s[1] == self.config.input_channels,
            "input has {} channels, model expects {}",
            s[1],
            self.config.input_channels
        );
        ensure!(valid.len() == s[0], "need one valid interval per sample");
        for (i, v) in valid.iter().enumerate() {
            ensure!(!v.is_empty() && v.end <= s[2], "sample {i}: interval {v:?} not within {} frames", s[2]);
        }
        if let LengthPolicy::FixedInterpolate { length } = self.config.length_policy {
            ensure!(
                s[2] == length && valid.iter().all(|v| v.len() == length),
                "fixed-length model expects fully valid inputs of {length} frames"
            );
        }
        Ok(())
    }

    /// Feature `z_f` fed to the classifier.
    pub fn features(&self, f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
        self.check_input(f, x, valid)?;
        let f0 = match &self.te {
            Some(te) => te.apply(f, x, valid)?,
            None => x,
        };
        let mut h = f0;
        let mut cur = valid.to_vec();
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, v) = block.forward(f, h, &cur)?;
            outs.push((y, v.clone()));
            h = y;
            cur = v;
        }
        let inputs = HeadInputs {
            input_level: self
                .config
                .head
                .uses_input_level()
                .then(|| (f0, valid.to_vec())),
            blocks: outs,
        };
        let lengths: Vec<usize> = valid.iter().map(ValidInterval::len).collect();
        self.head.forward(f, &inputs, &self.block_rfs(), &lengths)
    }

    pub fn logits(&self, f: &mut Forward<S>, x: Var, valid: &[ValidInterval]) -> Result<Var> {
        let mut z = self.features(f, x, valid)?;
        let last = self.classifier.len() - 1;
        for (i, layer) in self.classifier.iter().enumerate() {
            z = layer.forward(f, z)?;
            if i < last {
                z = f.tape.relu(z);
            }
        }
        Ok(z)
    }

    /// Eval-mode prediction for a padded batch.
    pub fn predict(&self, x: &Tensor<S>, valid: &[ValidInterval]) -> Result<PredictionOutput<S>> {
        let mut f = Forward::new(&self.params, Mode::Eval);
        let xv = f.tape.constant(x.clone());
        let z = self.logits(&mut f, xv, valid)?;
        Ok(PredictionOutput::from_logits(f.tape.value(z).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_table() {
        for name in PRESET_NAMES {
            let c = ModelConfig::preset(name, 5, 2, 980).unwrap();
            assert_eq!(c.te.is_some(), name.ends_with("-te"), "{name}");
            assert_eq!(c.classifier_hidden.is_some(), !name.contains("resnet"), "{name}");
        }
        assert!(ModelConfig::preset("resnet-vl-te", 5, 2, 980).is_err());
        assert!(ModelConfig::preset("lenet", 5, 2, 980).is_err());
        let r = ModelConfig::preset("resnet", 1, 3, 100).unwrap();
        assert_eq!(r.length_policy, LengthPolicy::FixedInterpolate { length: 100 });
        assert_eq!(r.rf_report().final_rf(), 43);
        let b = ModelConfig::preset("amscnn-te", 5, 2, 980).unwrap();
        assert_eq!(b.rf_report().block_rfs(), vec![8, 22, 62, 142, 334, 974]);
    }

    #[test]
    fn te_with_interpolation_rejected() {
        let mut c = ModelConfig::preset("resnet", 2, 2, 64).unwrap();
        c.te = Some(TeConfig {
            channels: None,
            t_max: 64,
            cyclic: false,
        });
        assert!(build_model::<f64>(&c, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut c = ModelConfig::preset("amscnn-te", 2, 3, 64).unwrap();
        c.backbone = base_backbone(&[4; 6]);
        c.head.projection_channels = 4;
        c.head.recurrent_hidden = 4;
        let a = build_model::<f64>(&c, 11).unwrap().checkpoint().to_bytes();
        let b = build_model::<f64>(&c, 11).unwrap().checkpoint().to_bytes();
        let d = build_model::<f64>(&c, 12).unwrap().checkpoint().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let mut c = ModelConfig::preset("amscnn", 2, 4, 600).unwrap();
        c.backbone = base_backbone(&[3; 6]);
        let mut m = build_model::<f64>(&c, 0).unwrap();
        for p in m.params.iter_mut() {
            if p.trainable {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let x = Tensor::from_fn(&[1, 2, 600], |i| (i as f64).sin());
        let out = m.predict(&x, &[ValidInterval::new(100, 400)]).unwrap();
        for &p in out.probabilities.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert_eq!(out.predicted, vec![0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let out = PredictionOutput::from_logits(Tensor::new(vec![2, 3], vec![1.0f64, 3.0, 3.0, 0.0, -1.0, 0.0]).unwrap());
        assert_eq!(out.predicted, vec![1, 0]);
        let s: f64 = out.probabilities.data()[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
