//! Cropping, resampling and the crop-ratio schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

use super::SeriesRecord;

/// Random sub-series keeping at least `ratio` of the frames. The crop length
/// is uniform on `[max(1, ceil(ratio * T)), T]` and its start uniform over the
/// feasible offsets; the timestamps of the kept frames are unchanged.
pub fn random_crop(record: &SeriesRecord, ratio: f64, rng: &mut impl Rng) -> SeriesRecord {
    assert!(ratio > 0.0 && ratio <= 1.0, "crop ratio must lie in (0, 1], got {ratio}");
    let t = record.len();
    let min_len = ((ratio * t as f64).ceil() as usize).clamp(1, t);
    if min_len == t {
        return record.clone();
    }
    let len = rng.random_range(min_len..=t);
    let start = rng.random_range(0..=t - len);
    record.slice(start, len)
}

/// Linear ramp of the minimum kept fraction from `start` at epoch 0 to `end`
/// at `ramp_end`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_end: usize,
}

impl Default for CropSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            ramp_end: 800,
        }
    }
}

impl CropSchedule {
    pub fn constant(ratio: f64) -> Self {
        Self {
            start: ratio,
            end: ratio,
            ramp_end: 0,
        }
    }

    pub fn ratio(&self, epoch: usize) -> f64 {
        crop_schedule(epoch, self.ramp_end, self.start, self.end)
    }
}

pub fn crop_schedule(epoch: usize, ramp_end: usize, start: f64, end: f64) -> f64 {
    if epoch >= ramp_end {
        return end;
    }
    start + (end - start) * (epoch as f64 / ramp_end as f64)
}

/// Resamples every channel onto `target` equally spaced points spanning the
/// original series and resets `t1` to 1.
pub fn resample_linear(record: &SeriesRecord, target: usize) -> Result<SeriesRecord> {
    ensure!(target >= 2, "resampling target must be >= 2, got {target}");
    let t = record.len();
    let mut values = Vec::with_capacity(record.channels * target);
    if t == 1 {
        log::warn!("record {} has a single frame; replicating it", record.id);
        for c in 0..record.channels {
            values.extend(std::iter::repeat_n(record.channel(c)[0], target));
        }
    } else {
        let scale = (t - 1) as f64 / (target - 1) as f64;
        for c in 0..record.channels {
            let x = record.channel(c);
            for i in 0..target {
                let pos = i as f64 * scale;
                let j = (pos.floor() as usize).min(t - 2);
                let w = pos - j as f64;
                values.push((1.0 - w) * x[j] + w * x[j + 1]);
            }
        }
    }
    Ok(SeriesRecord {
        id: record.id.clone(),
        label: record.label,
        t1: 1,
        channels: record.channels,
        values,
    })
}

/// First `ceil(T/2)` frames and the remainder, each keeping its timestamps.
pub fn half_crops(record: &SeriesRecord) -> (SeriesRecord, SeriesRecord) {
    let t = record.len();
    if t < 2 {
        log::warn!("record {} has a single frame; both halves are the record", record.id);
        return (record.clone(), record.clone());
    }
    let first = t.div_ceil(2);
    (record.slice(0, first), record.slice(first, t - first))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(t1: usize, t: usize) -> SeriesRecord {
        SeriesRecord::new("r", 1, t1, 1, (0..t).map(|i| 2.0 + 0.5 * i as f64).collect()).unwrap()
    }

    #[test]
    fn crop_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ramp(3, 10);
        assert_eq!(random_crop(&r, 1.0, &mut rng), r);
        for _ in 0..200 {
            let c = random_crop(&r, 0.1, &mut rng);
            assert!((1..=10).contains(&c.len()));
            assert!(c.t1 >= 3 && c.t_end() <= r.t_end());
            assert_eq!(c.values[0], r.values[c.t1 - 3]);
        }
    }

    #[test]
    fn schedule_points() {
        let s = CropSchedule::default();
        assert_eq!(s.ratio(0), 1.0);
        assert!((s.ratio(400) - 0.55).abs() < 1e-12);
        assert_eq!(s.ratio(800), 0.1);
        assert_eq!(s.ratio(1000), 0.1);
    }

    #[test]
    fn resampling() {
        let r = ramp(7, 9);
        let same = resample_linear(&r, 9).unwrap();
        assert_eq!(same.values, r.values);
        assert_eq!(same.t1, 1);
        let up = resample_linear(&r, 33).unwrap();
        assert_eq!(up.values[0], 2.0);
        assert_eq!(*up.values.last().unwrap(), 6.0);
        for w in up.values.windows(3) {
            assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-12);
        }
        let single = resample_linear(&ramp(1, 1), 4).unwrap();
        assert_eq!(single.values, vec![2.0; 4]);
    }

    #[test]
    fn halves() {
        let r = ramp(1, 10);
        let (a, b) = half_crops(&r);
        assert_eq!((a.t1, a.len(), b.t1, b.len()), (1, 5, 6, 5));
        let (a, b) = half_crops(&ramp(4, 9));
        assert_eq!((a.len(), b.len(), b.t1), (5, 4, 9));
        let joined: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
        assert_eq!(joined, ramp(4, 9).values);
    }
}
