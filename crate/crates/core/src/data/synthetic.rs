//! Synthetic partial trajectories with an event at a fixed timestamp.
//!
//! Each latent series spans timestamps `1..=t_max` and has five channels:
//! two coordinates, object size, and the mean and spread of the speed.
//! Before the event every class follows the same distribution (a static
//! position with correlated noise). After it the coordinates oscillate, and
//! the oscillation period changes once, around `switch_time`. Class 0 starts
//! fast and slows down; class 1 starts slow and speeds up. Further classes
//! use longer slow periods. Observed records are random fragments of the
//! latent series.
//!
//! A fragment that does not span the event or the switch shows a single
//! period that occurs in both classes, so the class follows only from the
//! period together with the absolute timestamp. Resampling to a fixed length
//! removes both.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

use super::{Dataset, DatasetMeta, SeriesRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub t_max: usize,
    pub event_time: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Centre of the timestamp at which the period changes; jittered by
    /// `switch_jitter` frames either way.
    pub switch_time: usize,
    pub switch_jitter: usize,
    /// Oscillation periods in frames (each scaled by a factor in [0.9, 1.1]).
    pub fast_period: f64,
    pub slow_period: f64,
    /// Standard deviation of the per-channel noise.
    pub noise: f64,
}

pub const SYNTHETIC_CHANNELS: usize = 5;
pub const CHANNEL_NAMES: [&str; SYNTHETIC_CHANNELS] = ["x", "y", "size", "v_mean", "v_std"];

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            t_max: 980,
            event_time: 40,
            classes: 2,
            min_len: 80,
            max_len: 980,
            train_size: 2000,
            test_size: 2000,
            switch_time: 510,
            switch_jitter: 30,
            fast_period: 30.0,
            slow_period: 90.0,
            noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            "need 1 <= min_len <= max_len, got [{}, {}]",
            self.min_len,
            self.max_len
        );
        ensure!(
            self.max_len <= self.t_max,
            "fragments of {} frames do not fit T_max = {}",
            self.max_len,
            self.t_max
        );
        ensure!((2..=4).contains(&self.classes), "classes must be in 2..=4");
        ensure!(
            self.event_time >= 1 && self.event_time <= self.t_max,
            "event time outside the series"
        );
        ensure!(
            self.switch_time > self.event_time + self.switch_jitter
                && self.switch_time + self.switch_jitter < self.t_max,
            "switch time must fall between the event and T_max"
        );
        ensure!(
            self.fast_period > 0.0 && self.slow_period > self.fast_period,
            "need 0 < fast_period < slow_period"
        );
        ensure!(self.noise >= 0.0, "noise must be >= 0");
        Ok(())
    }
}

/// Periods before and after the switch for a class.
fn periods(cfg: &SyntheticConfig, class: usize) -> (f64, f64) {
    let slow = cfg.slow_period * (1.0 + 0.5 * class.saturating_sub(1) as f64);
    if class == 0 {
        (cfg.fast_period, slow)
    } else {
        (slow, cfg.fast_period)
    }
}

/// One full-length latent series `[5, t_max]` of the given class.
pub fn latent_series(cfg: &SyntheticConfig, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let t_max = cfg.t_max;
    let std = |s: f64| Normal::new(0.0, s).expect("finite std");
    let x0 = 0.5 + std(0.1).sample(rng);
    let y0 = 0.5 + std(0.1).sample(rng);
    let s0 = 1.0 + std(0.1).sample(rng);
    let amp = rng.random_range(0.6..1.0);
    let (p_before, p_after) = periods(cfg, class);
    let p_before = p_before * rng.random_range(0.9..1.1);
    let p_after = p_after * rng.random_range(0.9..1.1);
    let j = cfg.switch_jitter;
    let switch = rng.random_range(cfg.switch_time - j..=cfg.switch_time + j);
    let mut phase = rng.random_range(0.0..TAU);
    let size_phase = rng.random_range(0.0..TAU);
    let noise = std(cfg.noise.max(f64::MIN_POSITIVE));
    let common_step = std((cfg.noise * 0.6).max(f64::MIN_POSITIVE));

    let mut out = vec![0.0; SYNTHETIC_CHANNELS * t_max];
    let mut common = 0.0;
    for f in 0..t_max {
        let t = f + 1;
        common = 0.8 * common + common_step.sample(rng);
        let (osc_x, osc_y, speed, active) = if t >= cfg.event_time {
            let tau = (t - cfg.event_time) as f64;
            let env = 1.0 - (-tau / 8.0).exp();
            let period = if t < switch { p_before } else { p_after };
            phase += TAU / period;
            // mean speed of the ellipse traced by (x, y), per frame
            let speed = amp * env * 0.85 * TAU / period;
            (amp * env * phase.sin(), 0.7 * amp * env * phase.cos(), speed, env)
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        let ch = [
            x0 + osc_x,
            y0 + osc_y,
            s0 + 0.05 * (TAU * t as f64 / 300.0 + size_phase).sin(),
            0.05 + 2.0 * speed,
            0.1 + 0.1 * active,
        ];
        for (c, v) in ch.into_iter().enumerate() {
            out[c * t_max + f] = v + 0.5 * common + noise.sample(rng);
        }
    }
    out
}

fn split(cfg: &SyntheticConfig, seed: u64, stream: u64, name: &str, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let t_max = cfg.t_max;
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let latent = latent_series(cfg, label, &mut rng);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let start = rng.random_range(0..=t_max - len);
            let values = (0..SYNTHETIC_CHANNELS)
                .flat_map(|c| latent[c * t_max + start..][..len].iter().copied())
                .collect();
            SeriesRecord {
                id: format!("{name}-{seed}-{i:05}"),
                label,
                t1: start + 1,
                channels: SYNTHETIC_CHANNELS,
                values,
            }
        })
        .collect();
    let mut meta = DatasetMeta::new(SYNTHETIC_CHANNELS, cfg.classes, cfg.min_len, t_max);
    meta.class_names = (0..cfg.classes)
        .map(|c| if c == 0 { "normal".to_string() } else { format!("anomaly{c}") })
        .collect();
    Dataset { meta, records }
}

/// Train and test splits drawn from disjoint latent series.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    Ok((
        split(cfg, seed, 0, "train", cfg.train_size),
        split(cfg, seed, 1, "test", cfg.test_size),
    ))
}

/// Welch statistic per channel comparing the per-series means of classes 0
/// and 1 over the frames `range` of full latent series.
pub fn class_mean_statistics(
    latents: &[(usize, Vec<f64>)],
    t_max: usize,
    range: std::ops::Range<usize>,
) -> Vec<f64> {
    (0..SYNTHETIC_CHANNELS)
        .map(|c| {
            let mut groups = [Vec::new(), Vec::new()];
            for (label, v) in latents {
                if *label < 2 {
                    let w = &v[c * t_max + range.start..c * t_max + range.end];
                    groups[*label].push(w.iter().sum::<f64>() / w.len() as f64);
                }
            }
            let stats = |g: &[f64]| {
                let n = g.len() as f64;
                let m = g.iter().sum::<f64>() / n;
                let var = g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
                (m, var / n)
            };
            let (m0, s0) = stats(&groups[0]);
            let (m1, s1) = stats(&groups[1]);
            (m1 - m0) / (s0 + s1).sqrt()
        })
        .collect()
}
