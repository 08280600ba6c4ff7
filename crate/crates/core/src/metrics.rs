//! Trajectory and action metrics: mean and final displacement (overall and
//! per length bin) and macro F1 with a confusion matrix.
//!
//! Estimates exist for frames `2..=T` (frame 1 is given ground truth), so
//! displacement metrics evaluate exactly those frames. Per-trajectory MAD is
//! the mean frame error; aggregate MAD/FAD are means over trajectories, which
//! makes the sample-weighted per-bin average equal the overall value.

use thiserror::Error;

use crate::data::{trajectory_length, LengthBin, LengthBins, LengthMeasure};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input for {0}")]
    Empty(&'static str),
    #[error("track length mismatch: estimate {est} vs ground truth {gt}")]
    LengthMismatch { est: usize, gt: usize },
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Mean displacement over the evaluated frames of one trajectory. Both
/// tracks span frames `1..=T`; frame 1 is skipped.
pub fn mad(est: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.len() < 2 {
        return Err(MetricsError::Empty("mad"));
    }
    let n = est.len() - 1;
    let sum: f64 = est
        .iter()
        .zip(gt)
        .skip(1)
        .map(|(&e, &g)| euclid(e, g))
        .sum();
    Ok(sum / n as f64)
}

/// Displacement at the final frame of one trajectory.
pub fn fad(est: &[(f64, f64)], gt: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.len() < 2 {
        return Err(MetricsError::Empty("fad"));
    }
    Ok(euclid(*est.last().unwrap(), *gt.last().unwrap()))
}

/// Row-major confusion counts, ground truth along rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn record(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.classes + pred] += 1;
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn gt_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.at(class, p)).sum()
    }

    pub fn pred_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|g| self.at(g, class)).sum()
    }

    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.at(class, class) as f64;
        let precision_den = self.pred_count(class) as f64;
        let recall_den = self.gt_count(class) as f64;
        if precision_den == 0.0 || recall_den == 0.0 {
            return 0.0;
        }
        let p = tp / precision_den;
        let r = tp / recall_den;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Unweighted mean of per-class F1. With `count_absent`, classes that appear
/// in neither prediction nor ground truth contribute F1 = 0; otherwise they
/// are skipped.
pub fn macro_f1(
    pred: &[usize],
    gt: &[usize],
    classes: usize,
    count_absent: bool,
) -> Result<(f64, ConfusionMatrix), MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::Empty("macro_f1"));
    }
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { est: pred.len(), gt: gt.len() });
    }
    let mut confusion = ConfusionMatrix::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes {
            return Err(MetricsError::LabelOutOfRange { label: p, classes });
        }
        if g >= classes {
            return Err(MetricsError::LabelOutOfRange { label: g, classes });
        }
        confusion.record(g, p);
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let present = confusion.gt_count(c) > 0 || confusion.pred_count(c) > 0;
        if present || count_absent {
            sum += confusion.f1(c);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(MetricsError::Empty("macro_f1 classes"));
    }
    Ok((sum / counted as f64, confusion))
}

/// One evaluated target trajectory with optional action labels, tracks over
/// frames `1..=T`.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub est_track: Vec<(f64, f64)>,
    pub gt_track: Vec<(f64, f64)>,
    /// Predicted/ground-truth action labels for frames `2..=T`.
    pub pred_actions: Vec<usize>,
    pub gt_actions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStats {
    pub mad: f64,
    pub fad: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub overall: BinStats,
    /// Indexed by [`LengthBin::index`]; `None` when a bin holds no samples.
    pub per_bin: [Option<BinStats>; 3],
    pub macro_f1: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn bin(&self, bin: LengthBin) -> Option<&BinStats> {
        self.per_bin[bin.index()].as_ref()
    }
}

/// Aggregate metrics over samples, binned by the ground-truth trajectory
/// length. Action metrics are computed when every sample carries labels.
pub fn evaluate(
    samples: &[EvalSample],
    bins: Option<&LengthBins>,
    measure: LengthMeasure,
    classes: usize,
    count_absent: bool,
) -> Result<MetricsReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty("evaluate"));
    }
    let mut per_traj: Vec<(LengthBin, f64, f64)> = Vec::with_capacity(samples.len());
    for s in samples {
        let m = mad(&s.est_track, &s.gt_track)?;
        let f = fad(&s.est_track, &s.gt_track)?;
        let bin = match bins {
            Some(b) => b.bin(trajectory_length(&s.gt_track, measure)),
            None => LengthBin::Short,
        };
        per_traj.push((bin, m, f));
    }

    let aggregate = |items: &[(LengthBin, f64, f64)]| BinStats {
        mad: items.iter().map(|x| x.1).sum::<f64>() / items.len() as f64,
        fad: items.iter().map(|x| x.2).sum::<f64>() / items.len() as f64,
        count: items.len(),
    };
    let overall = aggregate(&per_traj);
    let mut per_bin = [None, None, None];
    if bins.is_some() {
        for bin in LengthBin::ALL {
            let items: Vec<(LengthBin, f64, f64)> = per_traj
                .iter()
                .filter(|x| x.0 == bin)
                .copied()
                .collect();
            if !items.is_empty() {
                per_bin[bin.index()] = Some(aggregate(&items));
            }
        }
    }

    let with_actions = samples.iter().all(|s| !s.pred_actions.is_empty());
    let (f1, confusion) = if with_actions {
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for s in samples {
            pred.extend_from_slice(&s.pred_actions);
            gt.extend_from_slice(&s.gt_actions);
        }
        let (f1, cm) = macro_f1(&pred, &gt, classes, count_absent)?;
        (Some(f1), Some(cm))
    } else {
        (None, None)
    };

    Ok(MetricsReport { overall, per_bin, macro_f1: f1, confusion })
}
