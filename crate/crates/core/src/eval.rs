//! Metrics, batched inference and the evaluation protocols.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{half_crops, prepare_batch, SeriesRecord};
use crate::error::{ensure, invalid, Result};
use crate::model::{Model, PredictionOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `counts[true][predicted]`.
pub fn confusion(labels: &[usize], predicted: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        m[y][p] += 1;
    }
    m
}

pub fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let hit: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    hit as f64 / total.max(1) as f64
}

/// Mean per-class recall.
pub fn balanced_accuracy(confusion: &[Vec<u64>]) -> Result<f64> {
    ensure!(!confusion.is_empty(), "empty confusion matrix");
    let mut sum = 0.0;
    for (c, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        ensure!(n > 0, "class {c} has no samples");
        sum += row[c] as f64 / n as f64;
    }
    Ok(sum / confusion.len() as f64)
}

/// Balanced accuracy over the classes that occur; `None` without samples.
fn balanced_accuracy_present(confusion: &[Vec<u64>]) -> Option<f64> {
    let rows: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half, via mid-ranks.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    ensure!(scores.len() == positive.len(), "scores and labels differ in length");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    ensure!(n_pos > 0 && n_neg > 0, "AUROC needs both positive and negative samples");
    ensure!(scores.iter().all(|s| !s.is_nan()), "AUROC scores contain NaN");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest macro AUROC over the classes present in `labels`.
pub fn auroc_ovr(probabilities: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    ensure!(probabilities.len() == labels.len() * classes, "probabilities must be [n, classes]");
    let mut aucs = Vec::new();
    for c in 0..classes {
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if !pos.iter().any(|&p| p) {
            continue;
        }
        if pos.iter().all(|&p| p) {
            return Err(invalid!("AUROC needs at least two classes in the labels"));
        }
        let scores: Vec<f64> = (0..labels.len()).map(|i| probabilities[i * classes + c]).collect();
        aucs.push(auroc(&scores, &pos)?);
    }
    if classes == 2 {
        // both one-vs-rest curves coincide; avoid averaging rounding
        return Ok(aucs[aucs.len() - 1]);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Nearest-rank tertiles of `lengths`.
pub fn tertile_boundaries(lengths: &[usize]) -> Vec<usize> {
    if lengths.is_empty() {
        return vec![];
    }
    let mut s = lengths.to_vec();
    s.sort_unstable();
    let n = s.len();
    (1..3).map(|k| s[(k * n).div_ceil(3) - 1]).collect()
}

/// Group index of each length: group `g` holds `boundaries[g-1] < T <=
/// boundaries[g]`, so a length equal to a boundary falls in the lower group.
pub fn length_groups(lengths: &[usize], boundaries: &[usize]) -> Result<Vec<usize>> {
    ensure!(
        boundaries.windows(2).all(|w| w[0] <= w[1]),
        "length-group boundaries must be ascending"
    );
    Ok(lengths
        .iter()
        .map(|&t| boundaries.iter().filter(|&&b| t > b).count())
        .collect())
}

pub fn group_name(g: usize, groups: usize) -> String {
    match (groups, g) {
        (3, 0) => "short".into(),
        (3, 1) => "middle".into(),
        (3, 2) => "long".into(),
        _ => format!("group{g}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Complete,
    HalfCrop,
    Both,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "complete" => Ok(Self::Complete),
            "half_crop" => Ok(Self::HalfCrop),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown protocol {s:?} (complete, half_crop, both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetric {
    pub name: String,
    /// Lengths in `(lower, upper]`; `None` means unbounded.
    pub lower: Option<usize>,
    pub upper: Option<usize>,
    pub samples: usize,
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub view: String,
    pub seed: Option<u64>,
    pub samples: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub groups: Vec<GroupMetric>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Metrics keyed by name, for multi-seed summaries.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".to_string(), self.accuracy);
        m.insert("balanced_accuracy".to_string(), self.balanced_accuracy);
        if let Some(a) = self.auroc {
            m.insert("auroc".to_string(), a);
        }
        for g in &self.groups {
            if let Some(b) = g.balanced_accuracy {
                m.insert(format!("balanced_accuracy.{}", g.name), b);
            }
        }
        m
    }

    pub fn group(&self, name: &str) -> Option<&GroupMetric> {
        self.groups.iter().find(|g| g.name == name)
    }
}

fn thread_count() -> usize {
    std::env::var("PTSC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Eval-mode logits for every record, in order. Work is split into
/// contiguous shards over at most `PTSC_THREADS` workers; every sample is
/// computed independently, so the result does not depend on the split.
pub fn predict_records<S: Scalar>(
    model: &Model<S>,
    records: &[&SeriesRecord],
    t_max: usize,
    batch_size: usize,
) -> Result<PredictionOutput<S>> {
    ensure!(!records.is_empty(), "nothing to predict");
    ensure!(batch_size >= 1, "batch size must be >= 1");
    let run = |shard: &[&SeriesRecord]| -> Result<Vec<S>> {
        let mut out = Vec::with_capacity(shard.len() * model.config.classes);
        for chunk in shard.chunks(batch_size) {
            let b = prepare_batch::<S>(model.config.length_policy, chunk, t_max, None)?;
            let p = model.predict(&b.inputs, &b.valid)?;
            out.extend_from_slice(p.logits.data());
        }
        Ok(out)
    };
    let threads = thread_count().min(records.len().div_ceil(batch_size)).max(1);
    let logits = if threads == 1 {
        run(records)?
    } else {
        let per = records.len().div_ceil(threads);
        let parts: Vec<Result<Vec<S>>> = std::thread::scope(|s| {
            let handles: Vec<_> = records.chunks(per).map(|sh| s.spawn(move || run(sh))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(records.len() * model.config.classes);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(PredictionOutput::from_logits(Tensor::new(
        vec![records.len(), model.config.classes],
        logits,
    )?))
}

/// Metrics for one set of predictions.
pub fn report(
    view: &str,
    labels: &[usize],
    lengths: &[usize],
    out: &PredictionOutput<impl Scalar>,
    classes: usize,
    boundaries: &[usize],
) -> Result<EvalReport> {
    let conf = confusion(labels, &out.predicted, classes);
    let probs: Vec<f64> = out.probabilities.data().iter().map(|p| p.as_f64()).collect();
    let present = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let auroc = (present >= 2).then(|| auroc_ovr(&probs, labels, classes)).transpose()?;
    let groups_of = length_groups(lengths, boundaries)?;
    let groups = (0..=boundaries.len())
        .map(|g| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| groups_of[i] == g).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ps: Vec<usize> = idx.iter().map(|&i| out.predicted[i]).collect();
            GroupMetric {
                name: group_name(g, boundaries.len() + 1),
                lower: g.checked_sub(1).map(|k| boundaries[k]),
                upper: boundaries.get(g).copied(),
                samples: idx.len(),
                balanced_accuracy: balanced_accuracy_present(&confusion(&ys, &ps, classes)),
            }
        })
        .collect();
    Ok(EvalReport {
        view: view.to_string(),
        seed: None,
        samples: labels.len(),
        accuracy: accuracy(&conf),
        balanced_accuracy: balanced_accuracy_present(&conf).unwrap_or(0.0),
        auroc,
        groups,
        confusion: conf,
    })
}

/// Deterministic eval-mode pass over `records` under the protocol. The half
/// crop view scores both halves of every record as separate samples.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    records: &[SeriesRecord],
    t_max: usize,
    protocol: Protocol,
    boundaries: &[usize],
) -> Result<Vec<EvalReport>> {
    let n = model.config.classes;
    let mut reports = Vec::new();
    if matches!(protocol, Protocol::Complete | Protocol::Both) {
        let refs: Vec<&SeriesRecord> = records.iter().collect();
        let out = predict_records(model, &refs, t_max, 64)?;
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let lengths: Vec<usize> = records.iter().map(SeriesRecord::len).collect();
        reports.push(report("complete", &labels, &lengths, &out, n, boundaries)?);
    }
    if matches!(protocol, Protocol::HalfCrop | Protocol::Both) {
        let halves: Vec<SeriesRecord> = records
            .iter()
            .flat_map(|r| {
                let (a, b) = half_crops(r);
                [a, b]
            })
            .collect();
        let refs: Vec<&SeriesRecord> = halves.iter().collect();
        let out = predict_records(model, &refs, t_max, 64)?;
        let labels: Vec<usize> = halves.iter().map(|r| r.label).collect();
        let lengths: Vec<usize> = halves.iter().map(SeriesRecord::len).collect();
        reports.push(report("half_crop", &labels, &lengths, &out, n, boundaries)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Stat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, median, std, n }
}

/// Mean, median and standard deviation of every metric across runs. A
/// metric missing from some report is summarised over the others.
pub fn multi_seed_summary(reports: &[EvalReport]) -> Result<BTreeMap<String, Stat>> {
    ensure!(reports.len() >= 2, "a multi-seed summary needs at least 2 reports");
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r.metrics() {
            values.entry(k).or_default().push(v);
        }
    }
    Ok(values.into_iter().map(|(k, v)| (k, summarize(&v))).collect())
}

/// Plain-text table: one row per metric, one column per view.
pub fn format_reports(reports: &[EvalReport]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for r in reports {
        for k in r.metrics().keys() {
            if !rows.contains(k) {
                rows.push(k.clone());
            }
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<28}", "metric");
    for r in reports {
        let _ = write!(s, "  {:>10}", r.view);
    }
    s.push('\n');
    for k in &rows {
        let _ = write!(s, "{k:<28}");
        for r in reports {
            match r.metrics().get(k) {
                Some(v) => {
                    let _ = write!(s, "  {v:>10.4}");
                }
                None => {
                    let _ = write!(s, "  {:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn format_summary(summary: &BTreeMap<String, Stat>) -> String {
    let mut s = format!(
        "{:<28}  {:>8}  {:>8}  {:>8}  {:>3}\n",
        "metric", "mean", "median", "std", "n"
    );
    for (k, st) in summary {
        let _ = writeln!(
            s,
            "{k:<28}  {:>8.4}  {:>8.4}  {:>8.4}  {:>3}",
            st.mean, st.median, st.std, st.n
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[vec![3, 0], vec![0, 4]]).unwrap(), 1.0);
        let b = balanced_accuracy(&[vec![90, 10], vec![5, 5]]).unwrap();
        assert!((b - 0.7).abs() < 1e-15);
        assert!(balanced_accuracy(&[vec![1, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let y = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &y).unwrap(), 0.0);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn groups_and_boundaries() {
        let lengths: Vec<usize> = (80..=980).collect();
        let b = tertile_boundaries(&lengths);
        let g = length_groups(&lengths, &b).unwrap();
        let counts: Vec<usize> = (0..3).map(|k| g.iter().filter(|&&x| x == k).count()).collect();
        assert!(counts.iter().all(|&c| c > 0));
        assert_eq!(counts.iter().sum::<usize>(), lengths.len());
        assert_eq!(length_groups(&[10, 11], &[10, 20]).unwrap(), vec![0, 1]);
        assert!(length_groups(&[1], &[5, 2]).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.1, 0.9, 0.2]);
        assert_eq!(s.median, 0.2);
        assert_eq!(summarize(&[0.5, 0.5, 0.5]).std, 0.0);
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]).median, 2.5);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("half_crop".parse::<Protocol>().unwrap(), Protocol::HalfCrop);
        assert!("halves".parse::<Protocol>().is_err());
    }
}
