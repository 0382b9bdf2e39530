//! Partial series records, dataset files, preprocessing and batching.

mod augment;
mod format;
pub mod synthetic;

pub use augment::{crop_schedule, half_crops, random_crop, resample_linear, CropSchedule};
pub use format::{load_dataset, read_dataset, read_tsv, save_dataset, write_dataset};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::LengthPolicy;
use crate::rf::ValidInterval;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One labelled series `x ∈ R^{D×T}` observed from timestamp `t1` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRecord {
    pub id: String,
    pub label: usize,
    pub t1: usize,
    pub channels: usize,
    /// Channel-major `[D, T]`.
    pub values: Vec<f64>,
}

impl SeriesRecord {
    pub fn new(id: impl Into<String>, label: usize, t1: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(channels >= 1, "record needs at least one channel");
        ensure!(
            !values.is_empty() && values.len() % channels == 0,
            "{} values do not form {channels} non-empty channels",
            values.len()
        );
        ensure!(t1 >= 1, "timestamps start at 1, got t1 = {t1}");
        Ok(Self {
            id: id.into(),
            label,
            t1,
            channels,
            values,
        })
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Last observed timestamp, `t1 + T - 1`.
    pub fn t_end(&self) -> usize {
        self.t1 + self.len() - 1
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.values[c * t..][..t]
    }

    /// Frames `[start, start + len)` as a new record with shifted `t1`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let t = self.len();
        assert!(len >= 1 && start + len <= t, "slice out of range");
        let values = (0..self.channels)
            .flat_map(|c| self.values[c * t + start..][..len].iter().copied())
            .collect();
        Self {
            id: self.id.clone(),
            label: self.label,
            t1: self.t1 + start,
            channels: self.channels,
            values,
        }
    }
}

/// Per-channel min-max statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalization {
    pub fn fit(records: &[SeriesRecord]) -> Result<Self> {
        ensure!(!records.is_empty(), "cannot fit normalisation on no records");
        let d = records[0].channels;
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in records {
            ensure!(r.channels == d, "record {} has {} channels, expected {d}", r.id, r.channels);
            for c in 0..d {
                for &v in r.channel(c) {
                    min[c] = min[c].min(v);
                    max[c] = max[c].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    /// Maps each channel's fitted range onto `[0, 1]`. Constant channels map
    /// to 0.
    pub fn apply(&self, record: &mut SeriesRecord) {
        let t = record.len();
        for c in 0..record.channels {
            let (lo, hi) = (self.min[c], self.max[c]);
            let span = hi - lo;
            for v in &mut record.values[c * t..][..t] {
                *v = if span > 0.0 { (*v - lo) / span } else { *v - lo };
            }
        }
    }

    pub fn apply_all(&self, records: &mut [SeriesRecord]) {
        for r in records {
            self.apply(r);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub classes: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl DatasetMeta {
    pub fn new(channels: usize, classes: usize, t_min: usize, t_max: usize) -> Self {
        Self {
            channels,
            classes,
            t_min,
            t_max,
            class_names: (0..classes).map(|c| c.to_string()).collect(),
            normalization: None,
        }
    }

    /// Checks a record against the dataset's declared shape.
    pub fn check(&self, r: &SeriesRecord) -> std::result::Result<(), String> {
        if r.channels != self.channels {
            return Err(format!("record has {} channels, dataset declares {}", r.channels, self.channels));
        }
        if r.label >= self.classes {
            return Err(format!("label {} out of range for {} classes", r.label, self.classes));
        }
        let t = r.len();
        if t < self.t_min || t > self.t_max {
            return Err(format!("length {t} outside [{}, {}]", self.t_min, self.t_max));
        }
        if r.t_end() > self.t_max {
            return Err(format!(
                "t1 {} + T {t} - 1 = {} overruns T_max {}",
                r.t1,
                r.t_end(),
                self.t_max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<SeriesRecord>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.records.iter().map(SeriesRecord::len).collect()
    }
}

/// Padded model input for a group of records.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    /// `[B, D, frames]`, zero outside each valid interval.
    pub inputs: Tensor<S>,
    pub valid: Vec<ValidInterval>,
    pub labels: Vec<usize>,
    pub weights: Vec<S>,
}

/// Places every record at frames `[t1 - 1, t1 - 1 + T)` of a zero canvas of
/// `t_max` frames. `class_weights` (indexed by label) become sample weights;
/// `None` weighs every sample 1.
pub fn make_batch<S: Scalar>(
    records: &[&SeriesRecord],
    t_max: usize,
    class_weights: Option<&[f64]>,
) -> Result<Batch<S>> {
    ensure!(!records.is_empty(), "empty batch");
    let d = records[0].channels;
    let mut data = vec![S::zero(); records.len() * d * t_max];
    let mut valid = Vec::with_capacity(records.len());
    for (b, r) in records.iter().enumerate() {
        ensure!(r.channels == d, "record {} has {} channels, batch has {d}", r.id, r.channels);
        let t = r.len();
        ensure!(
            r.t_end() <= t_max,
            "record {} at t1 = {} with T = {t} overruns {t_max} frames",
            r.id,
            r.t1
        );
        let start = r.t1 - 1;
        for c in 0..d {
            let dst = &mut data[(b * d + c) * t_max + start..][..t];
            for (o, &v) in dst.iter_mut().zip(r.channel(c)) {
                *o = S::from_f64_lossy(v);
            }
        }
        valid.push(ValidInterval::new(start, start + t));
    }
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let weights = match class_weights {
        Some(w) => labels
            .iter()
            .map(|&l| {
                w.get(l)
                    .map(|&x| S::from_f64_lossy(x))
                    .ok_or_else(|| crate::error::invalid!("no weight for class {l}"))
            })
            .collect::<Result<_>>()?,
        None => vec![S::one(); labels.len()],
    };
    Ok(Batch {
        inputs: Tensor::new(vec![records.len(), d, t_max], data)?,
        valid,
        labels,
        weights,
    })
}

/// Builds the batch a model with the given length policy expects: padded
/// placement on `t_max` frames, or resampling to the fixed length.
pub fn prepare_batch<S: Scalar>(
    policy: LengthPolicy,
    records: &[&SeriesRecord],
    t_max: usize,
    class_weights: Option<&[f64]>,
) -> Result<Batch<S>> {
    match policy {
        LengthPolicy::VariableMasked => make_batch(records, t_max, class_weights),
        LengthPolicy::FixedInterpolate { length } => {
            let resampled: Vec<SeriesRecord> = records
                .iter()
                .map(|r| resample_linear(r, length))
                .collect::<Result<_>>()?;
            let refs: Vec<&SeriesRecord> = resampled.iter().collect();
            make_batch(&refs, length, class_weights)
        }
    }
}
