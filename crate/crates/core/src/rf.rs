//! Receptive-field arithmetic and valid-region bookkeeping for 1D conv/pool
//! stacks.
//!
//! Every layer is described by a [`LayerGeom`]; feature `j` of a layer reads
//! the previous layer's frames `[j*stride - padding, j*stride - padding + kernel)`.
//! Composing this over a stack gives, for every layer, the receptive-field size
//! `rf`, the `jump` between neighbouring features measured in input frames, and
//! the input index of the leftmost frame seen by feature 0.
//!
//! A [`ValidInterval`] marks the frames of a feature map that were computed from
//! real data only. A frame is valid iff its entire window lies inside the valid
//! interval of the layer below.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Geometry of one convolution or pooling layer along the time axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be >= 1");
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Stride-1 convolution padded to keep the length (for odd kernels).
    pub fn same_conv(kernel: usize) -> Self {
        Self::new(kernel, 1, kernel / 2)
    }

    /// Non-overlapping pooling window.
    pub fn pool(window: usize) -> Self {
        Self::new(window, window, 0)
    }

    /// Output extent for an input of `len` frames, `None` when the padded
    /// input is shorter than the kernel.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Receptive-field summary of one layer (or block boundary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfEntry {
    /// 1-based layer index.
    pub index: usize,
    pub rf: usize,
    pub jump: usize,
    /// Input index of the leftmost frame touched by feature 0; negative when
    /// padding reaches before the series.
    pub left_offset: i64,
}

impl RfEntry {
    /// Half-open input window `[lo, hi)` read by feature `j`.
    pub fn window(&self, j: usize) -> (i64, i64) {
        let lo = self.left_offset + (j * self.jump) as i64;
        (lo, lo + self.rf as i64)
    }
}

/// Applies the recurrence `rf_l = rf_{l-1} + (k_l - 1) * jump_{l-1}`,
/// `jump_l = jump_{l-1} * stride_l`, starting from `rf_0 = jump_0 = 1`.
pub fn rf_of_stack(layers: &[LayerGeom]) -> Vec<RfEntry> {
    let mut rf = 1usize;
    let mut jump = 1usize;
    let mut left = 0i64;
    layers
        .iter()
        .enumerate()
        .map(|(i, g)| {
            rf += (g.kernel - 1) * jump;
            left -= (g.padding * jump) as i64;
            jump *= g.stride;
            RfEntry {
                index: i + 1,
                rf,
                jump,
                left_offset: left,
            }
        })
        .collect()
}

/// Half-open frame range `[start, end)` of a feature map computed purely from
/// input data. An empty interval (`start == end`) keeps its position so the
/// length-1 fallback can be placed near where the data was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidInterval {
    pub start: usize,
    pub end: usize,
}

impl ValidInterval {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "interval start {start} > end {end}");
        Self { start, end }
    }

    pub fn full(len: usize) -> Self {
        Self { start: 0, end: len }
    }

    pub fn empty_at(pos: usize) -> Self {
        Self {
            start: pos,
            end: pos,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Maps the valid interval at a layer's input to its output under the
/// full-window rule. Returns an empty interval positioned at the output frame
/// whose window is centred closest to the input interval when no output frame
/// qualifies.
pub fn propagate_valid(interval: ValidInterval, geom: LayerGeom) -> ValidInterval {
    let s = interval.start as i64;
    let e = interval.end as i64;
    let k = geom.kernel as i64;
    let p = geom.padding as i64;
    let st = geom.stride as i64;
    if e > s {
        let lo = (s + p + st - 1).div_euclid(st);
        let hi = (e + p - k).div_euclid(st) + 1;
        if hi > lo {
            return ValidInterval::new(lo.max(0) as usize, hi as usize);
        }
    }
    // twice the input centre, mapped into output coordinates
    let twice_centre = if e > s { s + e - 1 } else { 2 * s };
    let num = twice_centre + 2 * p - (k - 1);
    let pos = (num as f64 / (2 * st) as f64 + 0.5).floor() as i64;
    ValidInterval::empty_at(pos.max(0) as usize)
}

/// Length-≥1 fallback: an empty interval becomes the single frame at its
/// position, clipped into `[0, extent)`. Non-empty intervals pass through.
pub fn clamp_nonempty(interval: ValidInterval, extent: usize) -> ValidInterval {
    assert!(extent >= 1, "extent must be >= 1");
    if !interval.is_empty() {
        return interval;
    }
    let pos = interval.start.min(extent - 1);
    ValidInterval::new(pos, pos + 1)
}

/// Number of blocks whose receptive field does not exceed each length.
pub fn truncation_table(block_rfs: &[usize], lengths: &[usize]) -> Vec<(usize, usize)> {
    lengths
        .iter()
        .map(|&t| (t, surviving_blocks(block_rfs, t)))
        .collect()
}

/// Blocks with `rf > len` are dropped; `rf == len` survives.
pub fn surviving_blocks(block_rfs: &[usize], len: usize) -> usize {
    block_rfs.iter().filter(|&&rf| rf <= len).count()
}

/// One row of an [`RfReport`]: the receptive field at the output of a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRf {
    /// 1-based block index.
    pub block: usize,
    /// Layers inside the block, e.g. `conv7 > pool2`.
    pub chain: String,
    pub rf: usize,
    pub jump: usize,
    pub left_offset: i64,
    /// Smallest input length for which the block survives truncation.
    pub min_length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfReport {
    pub layers: Vec<RfEntry>,
    pub blocks: Vec<BlockRf>,
}

/// Layer inside a block, tagged for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Pool,
}

impl RfReport {
    /// Builds the report from blocks given as ordered `(kind, geometry)` lists.
    pub fn from_blocks(blocks: &[Vec<(LayerKind, LayerGeom)>]) -> Self {
        let flat: Vec<LayerGeom> = blocks.iter().flatten().map(|(_, g)| *g).collect();
        let layers = rf_of_stack(&flat);
        let mut out = Vec::with_capacity(blocks.len());
        let mut cursor = 0usize;
        for (b, block) in blocks.iter().enumerate() {
            cursor += block.len();
            let chain = block
                .iter()
                .map(|(kind, g)| match kind {
                    LayerKind::Conv => format!("conv{}", g.kernel),
                    LayerKind::Pool => format!("pool{}", g.kernel),
                })
                .collect::<Vec<_>>()
                .join(" > ");
            let (rf, jump, left) = if cursor == 0 {
                (1, 1, 0)
            } else {
                let e = layers[cursor - 1];
                (e.rf, e.jump, e.left_offset)
            };
            out.push(BlockRf {
                block: b + 1,
                chain,
                rf,
                jump,
                left_offset: left,
                min_length: rf,
            });
        }
        Self {
            layers,
            blocks: out,
        }
    }

    pub fn block_rfs(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.rf).collect()
    }

    pub fn final_rf(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.rf)
    }

    /// Cumulative stride of the whole stack.
    pub fn final_jump(&self) -> usize {
        self.blocks.last().map_or(1, |b| b.jump)
    }

    pub fn to_table(&self) -> String {
        let width = self
            .blocks
            .iter()
            .map(|b| b.chain.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5}  {:<width$}  {:>6}  {:>6}  {:>10}",
            "block", "chain", "rf", "jump", "min_length"
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{:>5}  {:<width$}  {:>6}  {:>6}  {:>10}",
                b.block, b.chain, b.rf, b.jump, b.min_length
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_stack() -> Vec<Vec<(LayerKind, LayerGeom)>> {
        [(7, 2), (5, 4), (5, 2), (3, 4), (3, 2), (3, 4)]
            .iter()
            .map(|&(k, p)| {
                vec![
                    (LayerKind::Conv, LayerGeom::same_conv(k)),
                    (LayerKind::Pool, LayerGeom::pool(p)),
                ]
            })
            .collect()
    }

    #[test]
    fn residual_stack_has_rf_43() {
        let layers: Vec<_> = (0..3)
            .flat_map(|_| [9, 5, 3].map(LayerGeom::same_conv))
            .collect();
        let rf = rf_of_stack(&layers);
        assert_eq!(rf.last().unwrap().rf, 43);
        assert_eq!(rf.last().unwrap().jump, 1);
    }

    #[test]
    fn identity_layer() {
        let rf = rf_of_stack(&[LayerGeom::new(1, 1, 0)]);
        assert_eq!(
            rf,
            vec![RfEntry {
                index: 1,
                rf: 1,
                jump: 1,
                left_offset: 0
            }]
        );
    }

    #[test]
    fn base_stack_layer_and_block_rfs() {
        let report = RfReport::from_blocks(&base_stack());
        let per_layer: Vec<usize> = report.layers.iter().map(|e| e.rf).collect();
        assert_eq!(
            per_layer,
            vec![7, 8, 16, 22, 54, 62, 94, 142, 270, 334, 590, 974]
        );
        assert_eq!(report.block_rfs(), vec![8, 22, 62, 142, 334, 974]);
        assert_eq!(report.final_jump(), 512);
    }

    #[test]
    fn valid_region_of_same_conv() {
        let out = propagate_valid(ValidInterval::new(10, 30), LayerGeom::same_conv(5));
        assert_eq!(out, ValidInterval::new(12, 28));
    }

    #[test]
    fn full_input_without_padding_stays_full() {
        let out = propagate_valid(ValidInterval::full(20), LayerGeom::new(5, 1, 0));
        assert_eq!(out, ValidInterval::full(16));
    }

    #[test]
    fn short_interval_becomes_empty_near_centre() {
        let out = propagate_valid(ValidInterval::new(10, 13), LayerGeom::same_conv(5));
        assert!(out.is_empty());
        assert_eq!(out.start, 11);
    }

    #[test]
    fn pooled_interval_uses_full_windows() {
        // frames 3..9 under window 2 stride 2: windows (4,5) (6,7) fit, (2,3) and (8,9) do not
        let out = propagate_valid(ValidInterval::new(3, 9), LayerGeom::pool(2));
        assert_eq!(out, ValidInterval::new(2, 4));
        let empty = propagate_valid(ValidInterval::new(5, 6), LayerGeom::pool(2));
        assert_eq!(empty, ValidInterval::empty_at(2));
    }

    #[test]
    fn clamp_cases() {
        assert_eq!(
            clamp_nonempty(ValidInterval::empty_at(5), 10),
            ValidInterval::new(5, 6)
        );
        assert_eq!(
            clamp_nonempty(ValidInterval::new(2, 7), 10),
            ValidInterval::new(2, 7)
        );
        assert_eq!(
            clamp_nonempty(ValidInterval::empty_at(12), 10),
            ValidInterval::new(9, 10)
        );
    }

    #[test]
    fn truncation_examples() {
        let rfs = RfReport::from_blocks(&base_stack()).block_rfs();
        assert_eq!(
            truncation_table(&rfs, &[5, 100, 980]),
            vec![(5, 0), (100, 3), (980, 6)]
        );
        // boundary survives
        assert_eq!(surviving_blocks(&rfs, 142), 4);
        assert_eq!(surviving_blocks(&rfs, 141), 3);
    }

    #[test]
    fn output_len() {
        assert_eq!(LayerGeom::same_conv(7).output_len(980), Some(980));
        assert_eq!(LayerGeom::pool(4).output_len(3), None);
        assert_eq!(LayerGeom::pool(4).output_len(10), Some(2));
    }

    #[test]
    fn table_renders_every_block() {
        let t = RfReport::from_blocks(&base_stack()).to_table();
        assert_eq!(t.lines().count(), 7);
        assert!(t.contains("conv7 > pool2"));
        assert!(t.contains("974"));
    }
}
