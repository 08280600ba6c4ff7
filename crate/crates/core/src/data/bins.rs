//! Trajectory-length bins: short/mid/long boundaries chosen at the 1/3 and
//! 2/3 empirical quantiles of the training lengths so the bins hold
//! near-equal sample counts.

use super::{ClipRecord, DataError};
use serde::{Deserialize, Serialize};

/// How trajectory "length" is measured for binning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LengthMeasure {
    /// Cumulative per-frame displacement (default).
    #[default]
    PathLength,
    /// Net displacement from first to last frame.
    Displacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthBin {
    Short,
    Mid,
    Long,
}

impl LengthBin {
    pub const ALL: [LengthBin; 3] = [LengthBin::Short, LengthBin::Mid, LengthBin::Long];

    pub fn label(self) -> &'static str {
        match self {
            LengthBin::Short => "short",
            LengthBin::Mid => "mid",
            LengthBin::Long => "long",
        }
    }

    pub fn index(self) -> usize {
        match self {
            LengthBin::Short => 0,
            LengthBin::Mid => 1,
            LengthBin::Long => 2,
        }
    }
}

/// Length boundaries in dataset units. A length `l` is Short when
/// `l < short_max`, Mid when `short_max <= l < mid_max`, Long otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBins {
    pub short_max: f64,
    pub mid_max: f64,
}

impl LengthBins {
    pub fn new(short_max: f64, mid_max: f64) -> Result<Self, DataError> {
        if !(short_max < mid_max) {
            return Err(DataError::Invalid(format!(
                "bin boundaries must be strictly increasing, got {short_max} and {mid_max}"
            )));
        }
        Ok(Self { short_max, mid_max })
    }

    pub fn bin(&self, length: f64) -> LengthBin {
        if length < self.short_max {
            LengthBin::Short
        } else if length < self.mid_max {
            LengthBin::Mid
        } else {
            LengthBin::Long
        }
    }
}

pub fn path_length(positions: &[(f64, f64)]) -> f64 {
    positions
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

pub fn displacement(positions: &[(f64, f64)]) -> f64 {
    match (positions.first(), positions.last()) {
        (Some(a), Some(b)) => ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt(),
        _ => 0.0,
    }
}

/// Length of one target trajectory per the chosen measure.
pub fn trajectory_length(positions: &[(f64, f64)], measure: LengthMeasure) -> f64 {
    match measure {
        LengthMeasure::PathLength => path_length(positions),
        LengthMeasure::Displacement => displacement(positions),
    }
}

/// Net displacement measure, kept as a named entry point next to
/// [`trajectory_length`].
pub fn displacement_length(positions: &[(f64, f64)]) -> f64 {
    displacement(positions)
}

/// Compute bin boundaries from the target trajectories of training clips so
/// that each bin holds a near-equal sample count. Degenerate inputs (all
/// lengths equal at a boundary) are rejected with a hint to set bins
/// manually.
pub fn compute_bins(clips: &[ClipRecord], measure: LengthMeasure) -> Result<LengthBins, DataError> {
    let mut lengths: Vec<f64> = clips
        .iter()
        .flat_map(|c| c.targets().map(|t| trajectory_length(&t.positions, measure)))
        .collect();
    if lengths.len() < 3 {
        return Err(DataError::Invalid(format!(
            "need at least 3 target trajectories to compute bins, got {}",
            lengths.len()
        )));
    }
    lengths.sort_by(|a, b| a.partial_cmp(b).expect("finite lengths"));
    let n = lengths.len();
    let short_max = lengths[n / 3];
    let mid_max = lengths[2 * n / 3];
    if !(short_max < mid_max) {
        return Err(DataError::Invalid(format!(
            "degenerate quantiles (boundaries {short_max} and {mid_max}); set bins manually"
        )));
    }
    Ok(LengthBins { short_max, mid_max })
}
