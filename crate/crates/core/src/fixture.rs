//! Synthetic bearing-ring scenario: the robot lifts a ring out of a box,
//! carries it to a measurement station and inserts it.
//!
//! Demonstrations follow a smooth nominal path through waypoints with
//! per-demo perturbations that vanish at the grasp (box) and the station, so
//! every demonstration visits both at the same phase. The environment places
//! the box and station on the learned skill at those phases, a camera to the
//! left of the transfer motion and a blue box under it.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gmm::{build_reference_distribution, GmmError, LearnConfig, LearnedModel};
use crate::kmp::{predict_at, KmpError};
use crate::trajectory::{Demonstration, EnvironmentModel, EnvironmentObject};

pub const BOX_PHASE: f64 = 0.55;
pub const STATION_PHASE: f64 = 0.72;

/// Paper box dimensions, in meters.
pub const BLUE_BOX_DIMENSIONS: [f64; 3] = [0.15, 0.225, 0.235];

const WAYPOINTS: [(f64, [f64; 3]); 8] = [
    (0.00, [0.30, 0.00, 0.40]),
    (0.25, [0.42, 0.20, 0.28]),
    (0.45, [0.50, 0.26, 0.19]),
    (BOX_PHASE, [0.50, 0.25, 0.10]),
    (0.63, [0.52, 0.04, 0.21]),
    (STATION_PHASE, [0.55, -0.24, 0.15]),
    (0.85, [0.55, -0.25, 0.10]),
    (1.00, [0.40, -0.15, 0.35]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub demos: usize,
    pub seed: u64,
    /// Nominal demonstration duration in seconds.
    pub duration: f64,
    /// Relative spread of demonstration durations.
    pub duration_spread: f64,
    pub sample_rate: f64,
    /// Standard deviation of the spatial perturbation away from anchors, m.
    pub spatial_std: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { demos: 6, seed: 7, duration: 10.0, duration_spread: 0.05, sample_rate: 50.0, spatial_std: 0.025 }
    }
}

/// Cubic Hermite interpolation through the waypoints with finite-difference
/// tangents.
pub fn nominal(s: f64) -> Vector3<f64> {
    let s = s.clamp(0.0, 1.0);
    let pts: Vec<(f64, Vector3<f64>)> = WAYPOINTS.iter().map(|(t, p)| (*t, Vector3::from(*p))).collect();
    let tangent = |i: usize| -> Vector3<f64> {
        if i == 0 || i == pts.len() - 1 {
            return Vector3::zeros();
        }
        let (a, b) = (pts[i - 1], pts[i + 1]);
        (b.1 - a.1) / (b.0 - a.0)
    };
    let k = pts.partition_point(|(t, _)| *t <= s).clamp(1, pts.len() - 1) - 1;
    let (t0, p0) = pts[k];
    let (t1, p1) = pts[k + 1];
    let h = t1 - t0;
    let u = (s - t0) / h;
    let (u2, u3) = (u * u, u * u * u);
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    p0 * h00 + tangent(k) * (h10 * h) + p1 * h01 + tangent(k + 1) * (h11 * h)
}

/// Perturbation weight: zero at both ends and at the anchors, one far from
/// them.
fn envelope(s: f64) -> f64 {
    let well = |c: f64, w: f64| 1.0 - (-((s - c) / w).powi(2)).exp();
    well(0.0, 0.08) * well(1.0, 0.08) * well(BOX_PHASE, 0.05) * well(STATION_PHASE, 0.05)
}

pub fn demonstrations(cfg: &FixtureConfig) -> Vec<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.spatial_std).expect("positive spread");
    (0..cfg.demos)
        .map(|_| {
            let duration = cfg.duration * (1.0 + cfg.duration_spread * (2.0 * rng.random::<f64>() - 1.0));
            // three smooth modes per axis
            let modes: Vec<[(f64, f64); 3]> = (0..3)
                .map(|_| {
                    [1.0, 2.0, 3.0].map(|f| (normal.sample(&mut rng) / f, rng.random::<f64>() * std::f64::consts::TAU))
                })
                .collect();
            let samples = (duration * cfg.sample_rate).round() as usize;
            let data = (0..=samples)
                .map(|k| {
                    let t = if k == samples { duration } else { k as f64 / cfg.sample_rate };
                    let s = t / duration;
                    let mut p = nominal(s);
                    let w = envelope(s);
                    for (axis, m) in modes.iter().enumerate() {
                        let bump: f64 = m
                            .iter()
                            .enumerate()
                            .map(|(f, (a, phi))| a * ((f + 1) as f64 * std::f64::consts::PI * s + phi).sin())
                            .sum();
                        p[axis] += w * bump;
                    }
                    (t, DVector::from_column_slice(p.as_slice()))
                })
                .collect();
            Demonstration::new(data).expect("generated samples are valid")
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Learn(#[from] GmmError),
    #[error(transparent)]
    Kmp(#[from] KmpError),
}

/// Environment for a learned bearing-ring model: box and station where the
/// learned skill is at the anchor phases, camera to its left, blue box under
/// the transfer motion.
pub fn environment(model: &LearnedModel) -> Result<EnvironmentModel, FixtureError> {
    let p = predict_at(&model.reference, &[BOX_PHASE, STATION_PHASE, 0.63], false)?;
    let at = |i: usize| -> [f64; 3] { [p.means[i][0], p.means[i][1], p.means[i][2]] };
    let transfer = at(2);
    let blue_half_height = BLUE_BOX_DIMENSIONS[2] / 2.0;
    let objects = vec![
        EnvironmentObject { label: "box".into(), position: at(0), dimensions: [0.12, 0.12, 0.06] },
        EnvironmentObject { label: "station".into(), position: at(1), dimensions: [0.10, 0.10, 0.08] },
        EnvironmentObject {
            label: "camera".into(),
            position: [transfer[0] + 0.04, transfer[1] + 0.08, transfer[2] + 0.05],
            dimensions: [0.05, 0.05, 0.05],
        },
        EnvironmentObject {
            label: "blue box".into(),
            // resting on the table, top 2 cm above the transfer path
            position: [transfer[0], transfer[1] - 0.04, transfer[2] + 0.02 - blue_half_height],
            dimensions: BLUE_BOX_DIMENSIONS,
        },
    ];
    Ok(EnvironmentModel::new(objects, Some("A ring sits in the box; the station measures it after insertion.".into()))
        .expect("fixture objects are valid"))
}

pub struct Fixture {
    pub demos: Vec<Demonstration>,
    pub model: LearnedModel,
    pub env: EnvironmentModel,
}

pub fn build(fixture: &FixtureConfig, learn: &LearnConfig) -> Result<Fixture, FixtureError> {
    let demos = demonstrations(fixture);
    let model = build_reference_distribution(&demos, learn)?;
    let env = environment(&model)?;
    Ok(Fixture { demos, model, env })
}
