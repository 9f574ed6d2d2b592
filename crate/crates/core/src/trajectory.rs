//! Demonstrations, phase grids, time profiles, trajectories and the
//! environment model.
//!
//! Everything downstream works on the normalized phase `s = t / T` in
//! `[0, 1]`. Demonstrations are resampled onto a uniform phase grid; their
//! timing survives separately as a [`TimeProfile`] so that speed changes
//! never touch geometry.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid demonstration: {0}")]
    InvalidDemonstration(String),
    #[error("invalid time profile: {0}")]
    InvalidProfile(String),
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
}

/// A recorded demonstration: strictly increasing timestamps starting at zero
/// and one output vector per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    times: Vec<f64>,
    outputs: Vec<DVector<f64>>,
}

impl Demonstration {
    pub fn new(samples: Vec<(f64, DVector<f64>)>) -> Result<Self, TrajectoryError> {
        if samples.len() < 2 {
            return Err(TrajectoryError::InvalidDemonstration(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        let dim = samples[0].1.len();
        if dim == 0 {
            return Err(TrajectoryError::InvalidDemonstration(
                "output dimension must be at least 1".into(),
            ));
        }
        if samples[0].0 != 0.0 {
            return Err(TrajectoryError::InvalidDemonstration(format!(
                "first timestamp must be 0, got {}",
                samples[0].0
            )));
        }
        for (i, pair) in samples.windows(2).enumerate() {
            if !(pair[1].0 > pair[0].0) || !pair[1].0.is_finite() {
                return Err(TrajectoryError::InvalidDemonstration(format!(
                    "timestamps not strictly increasing at sample {}",
                    i + 1
                )));
            }
        }
        for (i, (_, x)) in samples.iter().enumerate() {
            if x.len() != dim {
                return Err(TrajectoryError::InvalidDemonstration(format!(
                    "sample {i} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::InvalidDemonstration(format!(
                    "sample {i} has a non-finite value"
                )));
            }
        }
        let (times, outputs) = samples.into_iter().unzip();
        Ok(Self { times, outputs })
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().expect("validated non-empty")
    }

    pub fn output_dim(&self) -> usize {
        self.outputs[0].len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn outputs(&self) -> &[DVector<f64>] {
        &self.outputs
    }
}

/// Uniform phase grid `s_h = h / (H - 1)`, `h = 0..H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseGrid {
    len: usize,
}

impl PhaseGrid {
    pub fn new(len: usize) -> Result<Self, TrajectoryError> {
        if len < 2 {
            return Err(TrajectoryError::GridTooSmall(len));
        }
        Ok(Self { len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.len - 1) as f64
    }

    /// Phase of grid point `index`. Computed as a single division so that
    /// e.g. point 55 of a 101-point grid is bitwise `0.55`.
    pub fn value(&self, index: usize) -> f64 {
        if index + 1 == self.len {
            1.0
        } else {
            index as f64 / (self.len - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.value(i)).collect()
    }

    /// Index of the grid point closest to phase `s` (clamped to the grid).
    pub fn nearest_index(&self, s: f64) -> usize {
        let raw = (s.clamp(0.0, 1.0) * (self.len - 1) as f64).round();
        (raw as usize).min(self.len - 1)
    }
}

/// Wall-clock intervals between consecutive points of a uniform phase grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    intervals: Vec<f64>,
}

impl TimeProfile {
    pub fn new(intervals: Vec<f64>) -> Result<Self, TrajectoryError> {
        if intervals.is_empty() {
            return Err(TrajectoryError::InvalidProfile("no intervals".into()));
        }
        if let Some(i) = intervals.iter().position(|dt| !(*dt > 0.0) || !dt.is_finite()) {
            return Err(TrajectoryError::InvalidProfile(format!(
                "interval {i} is not a positive finite number"
            )));
        }
        Ok(Self { intervals })
    }

    /// `points - 1` equal intervals summing to `duration`.
    pub fn uniform(duration: f64, points: usize) -> Result<Self, TrajectoryError> {
        if points < 2 {
            return Err(TrajectoryError::GridTooSmall(points));
        }
        Self::new(vec![duration / (points - 1) as f64; points - 1])
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    /// Number of grid points the profile is defined on.
    pub fn grid(&self) -> PhaseGrid {
        PhaseGrid { len: self.intervals.len() + 1 }
    }

    pub fn total_duration(&self) -> f64 {
        self.intervals.iter().sum()
    }

    /// Elapsed time at each grid point, starting at 0.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.intervals.len() + 1);
        let mut t = 0.0;
        out.push(t);
        for dt in &self.intervals {
            t += dt;
            out.push(t);
        }
        out
    }

    /// Elapsed time at phase `s`, linear within each interval.
    pub fn time_at(&self, s: f64) -> f64 {
        let cumulative = self.cumulative();
        let n = self.intervals.len();
        let x = s.clamp(0.0, 1.0) * n as f64;
        let i = (x.floor() as usize).min(n - 1);
        let frac = x - i as f64;
        cumulative[i] + frac * self.intervals[i]
    }

    /// Re-express the profile on a uniform grid of `points` points, keeping
    /// the elapsed-time curve. Returns `self` unchanged for a same-size grid.
    pub fn resample(&self, points: usize) -> Result<Self, TrajectoryError> {
        if points < 2 {
            return Err(TrajectoryError::GridTooSmall(points));
        }
        if points == self.intervals.len() + 1 {
            return Ok(self.clone());
        }
        let grid = PhaseGrid { len: points };
        let times: Vec<f64> = (0..points).map(|i| self.time_at(grid.value(i))).collect();
        Self::new(times.windows(2).map(|w| w[1] - w[0]).collect())
    }
}

/// A predicted trajectory on a uniform phase grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: PhaseGrid,
    pub positions: Vec<DVector<f64>>,
    pub covariances: Option<Vec<DMatrix<f64>>>,
    pub profile: TimeProfile,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// First three output components of point `index`.
    pub fn point3(&self, index: usize) -> Vector3<f64> {
        let p = &self.positions[index];
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn duration(&self) -> f64 {
        self.profile.total_duration()
    }
}

/// Resample a demonstration onto a uniform `points`-point phase grid by
/// piecewise-linear interpolation in `s = t / T`.
pub fn normalize_demonstration(
    demo: &Demonstration,
    points: usize,
) -> Result<(PhaseGrid, Vec<DVector<f64>>, TimeProfile), TrajectoryError> {
    if demo.len() < 2 {
        return Err(TrajectoryError::InvalidDemonstration(
            "need at least 2 samples".into(),
        ));
    }
    let grid = PhaseGrid::new(points)?;
    let duration = demo.duration();
    let phases: Vec<f64> = demo.times().iter().map(|t| t / duration).collect();
    let outputs = demo.outputs();
    let positions = (0..points)
        .map(|h| {
            let s = grid.value(h);
            // first sample phase strictly greater than s
            let upper = phases.partition_point(|&p| p <= s).clamp(1, phases.len() - 1);
            let lower = upper - 1;
            let span = phases[upper] - phases[lower];
            let w = ((s - phases[lower]) / span).clamp(0.0, 1.0);
            if w == 0.0 {
                outputs[lower].clone()
            } else if w == 1.0 {
                outputs[upper].clone()
            } else {
                &outputs[lower] * (1.0 - w) + &outputs[upper] * w
            }
        })
        .collect();
    let profile = TimeProfile::uniform(duration, points)?;
    Ok((grid, positions, profile))
}

/// Grid index whose position (first three components) is closest to
/// `point`, together with that distance. Ties go to the smaller index.
pub fn nearest_grid_index(traj: &Trajectory, point: &Vector3<f64>) -> (usize, f64) {
    nearest_in_range(traj, point, 0, traj.len() - 1)
}

/// Same as [`nearest_grid_index`] restricted to indices `first..=last`.
pub fn nearest_in_range(
    traj: &Trajectory,
    point: &Vector3<f64>,
    first: usize,
    last: usize,
) -> (usize, f64) {
    assert!(!traj.is_empty(), "trajectory must be non-empty");
    let last = last.min(traj.len() - 1);
    let mut best = (first, f64::INFINITY);
    for i in first..=last {
        let d = (traj.point3(i) - point).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// A labeled object observed in the workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentObject {
    pub label: String,
    pub position: [f64; 3],
    pub dimensions: [f64; 3],
}

impl EnvironmentObject {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn dimensions(&self) -> Vector3<f64> {
        Vector3::from(self.dimensions)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub objects: Vec<EnvironmentObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

pub(crate) fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

impl EnvironmentModel {
    pub fn new(
        objects: Vec<EnvironmentObject>,
        description: Option<String>,
    ) -> Result<Self, TrajectoryError> {
        let env = Self { objects, description };
        env.validate()?;
        Ok(env)
    }

    /// Checks label uniqueness and strictly positive dimensions.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut seen = std::collections::HashSet::new();
        for obj in &self.objects {
            let key = normalize_label(&obj.label);
            if key.is_empty() {
                return Err(TrajectoryError::InvalidEnvironment("empty label".into()));
            }
            if !seen.insert(key) {
                return Err(TrajectoryError::InvalidEnvironment(format!(
                    "duplicate label '{}'",
                    obj.label
                )));
            }
            if obj.dimensions.iter().any(|d| !(*d > 0.0)) {
                return Err(TrajectoryError::InvalidEnvironment(format!(
                    "object '{}' has non-positive dimensions",
                    obj.label
                )));
            }
            if obj.position.iter().chain(obj.dimensions.iter()).any(|v| !v.is_finite()) {
                return Err(TrajectoryError::InvalidEnvironment(format!(
                    "object '{}' has non-finite geometry",
                    obj.label
                )));
            }
        }
        Ok(())
    }

    /// Case-insensitive, whitespace-trimmed label lookup.
    pub fn find(&self, label: &str) -> Option<&EnvironmentObject> {
        let key = normalize_label(label);
        self.objects.iter().find(|o| normalize_label(&o.label) == key)
    }
}
