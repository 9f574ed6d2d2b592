//! The three adaptation tools (speed modulation, via-point insertion,
//! repulsion point generation), segment determination and SDF geometry.
//!
//! Tools are pure: they take the current reference distribution and its
//! prediction and return a new distribution plus a summary. Argument checks
//! happen before any mutation so a failed call leaves nothing behind.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::kmp::{
    insert_via_points, predict_mean, scale_time_profile, KmpError, Provenance, ReferenceDistribution, ViaPoint,
};
use crate::trajectory::{nearest_in_range, EnvironmentModel, EnvironmentObject, Trajectory, TrajectoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToolError {
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("object '{label}' is not on the trajectory: closest approach {distance:.4} m exceeds {threshold:.4} m")]
    ObjectNotOnTrajectory { label: String, distance: f64, threshold: f64 },
    #[error("invalid segment: start {start} must be below end {end}")]
    InvalidSegment { start: f64, end: f64 },
    #[error("{parameter} = {value} is outside [{min}, {max}]")]
    OutOfRange { parameter: String, value: f64, min: f64, max: f64 },
    #[error("{parameter} at [{:.3}, {:.3}, {:.3}] m lies outside the workspace", point[0], point[1], point[2])]
    OutsideWorkspace { parameter: String, point: [f64; 3] },
    #[error("invalid argument {parameter}: {message}")]
    InvalidArgument { parameter: String, message: String },
    #[error("repulsion direction undefined at phase {phase}: point coincides with the obstacle center")]
    DegenerateDirection { phase: f64 },
    #[error("repulsion failed after {iterations} iterations: worst penetration of the safety margin {penetration:.4} m")]
    RepulsionFailed { iterations: usize, penetration: f64 },
    #[error(transparent)]
    Kmp(#[from] KmpError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

/// Signed distance field of a primitive obstacle; positive outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Sdf {
    Sphere { center: [f64; 3], radius: f64 },
    #[serde(rename = "box")]
    Cuboid { center: [f64; 3], half_extents: [f64; 3] },
}

const GRADIENT_STEP: f64 = 1e-6;
const PROJECTION_STEPS: usize = 10;

impl Sdf {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self, ToolError> {
        let sdf = Sdf::Sphere { center: center.into(), radius };
        sdf.validate()?;
        Ok(sdf)
    }

    pub fn cuboid(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self, ToolError> {
        let sdf = Sdf::Cuboid { center: center.into(), half_extents: half_extents.into() };
        sdf.validate()?;
        Ok(sdf)
    }

    /// Box spanning the object's dimensions around its position.
    pub fn from_object(object: &EnvironmentObject) -> Self {
        Sdf::Cuboid { center: object.position, half_extents: (object.dimensions() * 0.5).into() }
    }

    pub fn validate(&self) -> Result<(), ToolError> {
        let ok = match self {
            Sdf::Sphere { center, radius } => center.iter().all(|v| v.is_finite()) && *radius > 0.0 && radius.is_finite(),
            Sdf::Cuboid { center, half_extents } => {
                center.iter().all(|v| v.is_finite()) && half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ToolError::InvalidArgument {
                parameter: "obstacle".into(),
                message: "radius and half-extents must be positive and finite".into(),
            })
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        match self {
            Sdf::Sphere { center, .. } | Sdf::Cuboid { center, .. } => Vector3::from(*center),
        }
    }

    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Sdf::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Sdf::Cuboid { center, half_extents } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                q.sup(&Vector3::zeros()).norm() + q.max().min(0.0)
            }
        }
    }

    /// Central finite-difference gradient.
    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = GRADIENT_STEP;
            g[axis] = (self.eval(&(p + e)) - self.eval(&(p - e))) / (2.0 * GRADIENT_STEP);
        }
        g
    }

    /// Corrected point at signed distance `margin`, or `None` when the
    /// direction is undefined (point at the center).
    pub fn project(&self, p: &Vector3<f64>, margin: f64) -> Option<Vector3<f64>> {
        match self {
            Sdf::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let offset = p - c;
                let norm = offset.norm();
                if norm == 0.0 {
                    return None;
                }
                Some(c + offset / norm * (radius + margin))
            }
            Sdf::Cuboid { .. } => {
                let mut x = *p;
                for _ in 0..PROJECTION_STEPS {
                    let d = self.eval(&x);
                    if (d - margin).abs() < 1e-12 {
                        break;
                    }
                    let g = self.gradient(&x);
                    let norm = g.norm();
                    if norm < 1e-9 {
                        return None;
                    }
                    x -= g / norm * (d - margin);
                }
                Some(x)
            }
        }
    }
}

impl Sdf {
    /// Point `p + t·direction` with the smallest `t ≥ 0` whose signed
    /// distance reaches `margin`. The SDF of a convex shape is convex along
    /// any ray, so the crossing is unique and bisection finds it.
    pub fn project_along(&self, p: &Vector3<f64>, direction: &Vector3<f64>, margin: f64) -> Option<Vector3<f64>> {
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let u = direction / norm;
        if self.eval(p) >= margin {
            return Some(*p);
        }
        let (mut lo, mut hi) = (0.0, 1e-3);
        while self.eval(&(p + u * hi)) < margin {
            lo = hi;
            hi *= 2.0;
            if hi > 1e6 {
                return None;
            }
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if self.eval(&(p + u * mid)) < margin {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(p + u * hi)
    }
}

/// Axis-aligned workspace box in the robot base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self { min: [-1.0; 3], max: [1.0; 3] }
    }
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolConfig {
    /// Maximum distance between an object and the trajectory for the object
    /// to anchor a phase.
    pub d_prox: f64,
    pub delta_safe: f64,
    pub eps_thresh: f64,
    /// Minimum time spent at a via-point target, in seconds.
    pub dwell_time: f64,
    pub max_repulsion_iters: usize,
    pub max_via_points_per_segment: usize,
    /// Cap on repulsion via-points per colliding run; `None` uses every
    /// colliding grid point.
    pub repulsion_points_per_run: Option<usize>,
    /// Speed changes are limited to `[-speed_limit, speed_limit]` percent.
    pub speed_limit: f64,
    pub via_variance: f64,
    pub repulsion_variance: f64,
    pub workspace: Workspace,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            d_prox: 0.02,
            delta_safe: 0.02,
            eps_thresh: 1e-3,
            dwell_time: 0.5,
            max_repulsion_iters: 5,
            max_via_points_per_segment: 10,
            repulsion_points_per_run: None,
            speed_limit: 200.0,
            via_variance: 1e-6,
            repulsion_variance: 1e-6,
            workspace: Workspace::default(),
        }
    }
}

/// Phase argument given either numerically or as an object label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhaseOrLabel {
    Phase(f64),
    Label(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", content = "labels", rename_all = "snake_case")]
pub enum SegmentSource {
    Explicit,
    ObjectAnchored(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSpec {
    pub s_start: f64,
    pub s_end: f64,
    pub source: SegmentSource,
}

impl SegmentSpec {
    pub fn new(s_start: f64, s_end: f64, source: SegmentSource) -> Result<Self, ToolError> {
        if !(0.0 <= s_start && s_start < s_end && s_end <= 1.0) {
            return Err(ToolError::InvalidSegment { start: s_start, end: s_end });
        }
        Ok(Self { s_start, s_end, source })
    }
}

fn lookup<'a>(env: &'a EnvironmentModel, label: &str) -> Result<&'a EnvironmentObject, ToolError> {
    env.find(label).ok_or_else(|| ToolError::UnknownObject(label.trim().to_string()))
}

/// Phase of the grid point closest to the labeled object, gated by `d_prox`.
pub fn anchor_phase(
    traj: &Trajectory,
    env: &EnvironmentModel,
    label: &str,
    cfg: &ToolConfig,
) -> Result<(usize, f64), ToolError> {
    let object = lookup(env, label)?;
    let (index, distance) = nearest_in_range(traj, &object.position(), 0, traj.len() - 1);
    if distance > cfg.d_prox {
        return Err(ToolError::ObjectNotOnTrajectory {
            label: object.label.clone(),
            distance,
            threshold: cfg.d_prox,
        });
    }
    Ok((index, traj.grid.value(index)))
}

/// Segment between one or two objects. With one label, `direction` picks
/// `[0, s]` (before) or `[s, 1]` (after).
pub fn determine_segment(
    traj: &Trajectory,
    env: &EnvironmentModel,
    labels: &[&str],
    direction: Option<Direction>,
    cfg: &ToolConfig,
) -> Result<SegmentSpec, ToolError> {
    let source = SegmentSource::ObjectAnchored(labels.iter().map(|l| l.trim().to_string()).collect());
    match labels {
        [one] => {
            let (_, s) = anchor_phase(traj, env, one, cfg)?;
            match direction {
                Some(Direction::Before) => SegmentSpec::new(0.0, s, source),
                Some(Direction::After) => SegmentSpec::new(s, 1.0, source),
                None => Err(ToolError::InvalidArgument {
                    parameter: "direction".into(),
                    message: "a single anchor needs before or after".into(),
                }),
            }
        }
        [a, b] => {
            let (_, sa) = anchor_phase(traj, env, a, cfg)?;
            let (_, sb) = anchor_phase(traj, env, b, cfg)?;
            SegmentSpec::new(sa.min(sb), sa.max(sb), source)
        }
        _ => Err(ToolError::InvalidArgument {
            parameter: "labels".into(),
            message: format!("expected 1 or 2 labels, got {}", labels.len()),
        }),
    }
}

/// Result of a successful tool execution.
#[derive(Debug, Clone)]
pub struct ToolOutcome {
    pub reference: ReferenceDistribution,
    pub summary: String,
    /// Arguments after label resolution, for the trace.
    pub resolved: serde_json::Value,
    /// Mean prediction on the execution grid when the tool computed it
    /// anyway; lets the caller skip a re-prediction.
    pub prediction: Option<Trajectory>,
}

fn check_range(parameter: &str, value: f64, min: f64, max: f64) -> Result<(), ToolError> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(ToolError::OutOfRange { parameter: parameter.into(), value, min, max })
    }
}

fn check_vector(parameter: &str, v: &Vector3<f64>) -> Result<(), ToolError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ToolError::InvalidArgument { parameter: parameter.into(), message: "components must be finite".into() })
    }
}

fn check_workspace(parameter: &str, p: &Vector3<f64>, cfg: &ToolConfig) -> Result<(), ToolError> {
    if cfg.workspace.contains(p) {
        Ok(())
    } else {
        Err(ToolError::OutsideWorkspace { parameter: parameter.into(), point: (*p).into() })
    }
}

fn resolve_phase(
    parameter: &str,
    value: &PhaseOrLabel,
    traj: &Trajectory,
    env: &EnvironmentModel,
    cfg: &ToolConfig,
) -> Result<f64, ToolError> {
    match value {
        PhaseOrLabel::Phase(s) => {
            check_range(parameter, *s, 0.0, 1.0)?;
            Ok(*s)
        }
        PhaseOrLabel::Label(label) => Ok(anchor_phase(traj, env, label, cfg)?.1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedArgs {
    /// Percent; positive slows down.
    pub gamma: f64,
    /// Defaults to the start of the trajectory.
    pub start: Option<PhaseOrLabel>,
    /// Defaults to the end of the trajectory.
    pub end: Option<PhaseOrLabel>,
}

pub fn tool_speed(
    reference: &ReferenceDistribution,
    traj: &Trajectory,
    env: &EnvironmentModel,
    args: &SpeedArgs,
    cfg: &ToolConfig,
) -> Result<ToolOutcome, ToolError> {
    check_range("speed_up_value", args.gamma, -cfg.speed_limit, cfg.speed_limit)?;
    let start = args.start.clone().unwrap_or(PhaseOrLabel::Phase(0.0));
    let end = args.end.clone().unwrap_or(PhaseOrLabel::Phase(1.0));
    let segment = match (&start, &end) {
        (PhaseOrLabel::Label(a), PhaseOrLabel::Label(b)) => {
            determine_segment(traj, env, &[a.as_str(), b.as_str()], None, cfg)?
        }
        _ => {
            let s0 = resolve_phase("adaption_start", &start, traj, env, cfg)?;
            let s1 = resolve_phase("adaption_end", &end, traj, env, cfg)?;
            let labels: Vec<String> = [&start, &end]
                .into_iter()
                .filter_map(|v| match v {
                    PhaseOrLabel::Label(l) => Some(l.trim().to_string()),
                    PhaseOrLabel::Phase(_) => None,
                })
                .collect();
            let source = if labels.is_empty() { SegmentSource::Explicit } else { SegmentSource::ObjectAnchored(labels) };
            SegmentSpec::new(s0, s1, source)?
        }
    };
    let before = reference.profile().total_duration();
    let updated = scale_time_profile(reference, segment.s_start, segment.s_end, args.gamma)?;
    let after = updated.profile().total_duration();
    let verb = if args.gamma >= 0.0 { "Slowed down" } else { "Sped up" };
    let summary = format!(
        "{verb} by {}% between s = {:.3} and s = {:.3}; duration {:.2} s -> {:.2} s",
        args.gamma.abs(),
        segment.s_start,
        segment.s_end,
        before,
        after
    );
    let mut prediction = traj.clone();
    prediction.profile = updated.profile().resample(traj.len())?;
    Ok(ToolOutcome {
        reference: updated,
        summary,
        resolved: json!({
            "speed_up_value": args.gamma,
            "segment": segment,
            "duration_before": before,
            "duration_after": after,
        }),
        prediction: (traj.len() == reference.execution_grid().len()).then_some(prediction),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViaTarget {
    Label(String),
    Position(Vector3<f64>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViaArgs {
    /// Absent target means "the current trajectory point at `s_hint`".
    pub target: Option<ViaTarget>,
    /// Added to the target, robot base frame (+x forward, +y left, +z up).
    pub offset: Option<Vector3<f64>>,
    pub s_hint: Option<f64>,
    /// Restrict the anchor search to phases after this one.
    pub after: Option<PhaseOrLabel>,
    /// Restrict the anchor search to phases before this one.
    pub before: Option<PhaseOrLabel>,
    /// Isotropic via-point variance; defaults to `cfg.via_variance`.
    pub covariance_scale: Option<f64>,
}

/// Number of via-points that keeps the trajectory at the target for the
/// dwell time, given the local interval.
pub fn via_point_count(dwell_time: f64, local_dt: f64, cap: usize) -> usize {
    let n = if dwell_time <= 0.0 { 0 } else { (dwell_time / local_dt).ceil() as usize };
    n.max(1).min(cap.max(1))
}

pub fn tool_via_point(
    reference: &ReferenceDistribution,
    traj: &Trajectory,
    env: &EnvironmentModel,
    args: &ViaArgs,
    cfg: &ToolConfig,
) -> Result<ToolOutcome, ToolError> {
    if let Some(s) = args.s_hint {
        check_range("s_hint", s, 0.0, 1.0)?;
    }
    let variance = args.covariance_scale.unwrap_or(cfg.via_variance);
    check_range("covariance_scale", variance, 1e-12, 1.0)?;
    if let Some(offset) = &args.offset {
        check_vector("offset", offset)?;
    }
    let last = traj.len() - 1;
    let lo = match &args.after {
        Some(v) => resolve_phase("after", v, traj, env, cfg)?,
        None => 0.0,
    };
    let hi = match &args.before {
        Some(v) => resolve_phase("before", v, traj, env, cfg)?,
        None => 1.0,
    };
    if lo >= hi {
        return Err(ToolError::InvalidSegment { start: lo, end: hi });
    }
    let (base, label) = match &args.target {
        Some(ViaTarget::Label(label)) => (lookup(env, label)?.position(), Some(lookup(env, label)?.label.clone())),
        Some(ViaTarget::Position(p)) => {
            check_vector("target_position", p)?;
            (*p, None)
        }
        None => {
            let s = args.s_hint.ok_or_else(|| ToolError::InvalidArgument {
                parameter: "s_hint".into(),
                message: "required when no target is given".into(),
            })?;
            if args.offset.is_none() {
                return Err(ToolError::InvalidArgument {
                    parameter: "offset".into(),
                    message: "a target or an offset is required".into(),
                });
            }
            (traj.point3(traj.grid.nearest_index(s)), None)
        }
    };
    let target = base + args.offset.unwrap_or_else(Vector3::zeros);
    check_workspace("target", &target, cfg)?;

    let grid = traj.grid;
    let anchor = match args.s_hint {
        Some(s) => grid.nearest_index(s),
        None => {
            let first = grid.nearest_index(lo);
            let last_in = grid.nearest_index(hi).min(last);
            nearest_in_range(traj, &target, first, last_in).0
        }
    };
    let profile = reference.profile().resample(grid.len())?;
    let local_dt = profile.intervals()[anchor.min(last - 1)];
    let count = via_point_count(cfg.dwell_time, local_dt, cfg.max_via_points_per_segment).min(grid.len());
    // block of `count` consecutive grid points centered on the anchor
    let first = anchor.saturating_sub((count - 1) / 2).min(grid.len() - count);
    let mut mean = DVector::zeros(reference.output_dim());
    for i in 0..reference.output_dim() {
        mean[i] = if i < 3 { target[i] } else { traj.positions[anchor][i] };
    }
    let vias: Vec<ViaPoint> = (first..first + count)
        .map(|i| ViaPoint {
            phase: grid.value(i),
            mean: mean.clone(),
            covariance: DMatrix::identity(mean.len(), mean.len()) * variance,
        })
        .collect();
    let updated = insert_via_points(reference, &vias, Provenance::ViaPoint)?;
    let s_anchor = grid.value(anchor);
    let summary = format!(
        "Inserted {count} via-point(s) at [{:.3}, {:.3}, {:.3}] m around s = {:.3}{}",
        target[0],
        target[1],
        target[2],
        s_anchor,
        label.as_ref().map(|l| format!(" ({l})")).unwrap_or_default()
    );
    Ok(ToolOutcome {
        reference: updated,
        summary,
        resolved: json!({
            "target": [target[0], target[1], target[2]],
            "label": label,
            "anchor_phase": s_anchor,
            "phases": vias.iter().map(|v| v.phase).collect::<Vec<_>>(),
            "variance": variance,
        }),
        prediction: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObstacleSpec {
    Label(String),
    Shape(Sdf),
}

/// Resolve an obstacle to its SDF; labels become boxes of the object's
/// dimensions.
pub fn resolve_obstacle(env: &EnvironmentModel, obstacle: &ObstacleSpec) -> Result<(Sdf, Option<String>), ToolError> {
    match obstacle {
        ObstacleSpec::Label(label) => {
            let object = lookup(env, label)?;
            Ok((Sdf::from_object(object), Some(object.label.clone())))
        }
        ObstacleSpec::Shape(sdf) => {
            sdf.validate()?;
            Ok((*sdf, None))
        }
    }
}

/// Maximal runs of consecutive indices.
fn runs(indices: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some(run) if *run.last().unwrap() + 1 == i => run.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

/// Evenly strided subset of `run` with both ends included.
fn stride(run: &[usize], cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if run.len() > cap.max(2) => {
            let cap = cap.max(2);
            let mut picked: Vec<usize> = (0..cap)
                .map(|k| run[(k as f64 * (run.len() - 1) as f64 / (cap - 1) as f64).round() as usize])
                .collect();
            picked.dedup();
            picked
        }
        _ => run.to_vec(),
    }
}

fn min_clearance(sdf: &Sdf, traj: &Trajectory) -> f64 {
    (0..traj.len()).map(|i| sdf.eval(&traj.point3(i))).fold(f64::INFINITY, f64::min)
}

pub fn tool_repulsion(
    reference: &ReferenceDistribution,
    traj: &Trajectory,
    env: &EnvironmentModel,
    obstacle: &ObstacleSpec,
    cfg: &ToolConfig,
) -> Result<ToolOutcome, ToolError> {
    let (sdf, label) = resolve_obstacle(env, obstacle)?;
    let grid = reference.execution_grid();
    let mut current = reference.clone();
    let mut prediction = if traj.grid == grid { traj.clone() } else { predict_mean(reference, grid)? };
    let initial_clearance = min_clearance(&sdf, &prediction);
    let mut inserted = 0;
    let mut iterations = 0;
    loop {
        let colliding: Vec<usize> =
            (0..prediction.len()).filter(|i| sdf.eval(&prediction.point3(*i)) < cfg.delta_safe).collect();
        let mut corrections = Vec::new();
        for run in runs(&colliding) {
            let direction = match sdf {
                Sdf::Sphere { .. } => None,
                // one push direction per run keeps neighbouring targets on the same face
                Sdf::Cuboid { .. } => {
                    let deepest = *run
                        .iter()
                        .min_by(|a, b| {
                            let da = sdf.eval(&prediction.point3(**a));
                            let db = sdf.eval(&prediction.point3(**b));
                            da.partial_cmp(&db).unwrap().then(a.cmp(b))
                        })
                        .unwrap();
                    let g = sdf.gradient(&prediction.point3(deepest));
                    if g.norm() < 1e-9 {
                        return Err(ToolError::DegenerateDirection { phase: grid.value(deepest) });
                    }
                    Some(g)
                }
            };
            for i in run {
                let p = prediction.point3(i);
                let x = match &direction {
                    None => sdf.project(&p, cfg.delta_safe),
                    Some(u) => sdf.project_along(&p, u, cfg.delta_safe),
                }
                .ok_or(ToolError::DegenerateDirection { phase: grid.value(i) })?;
                if (p - x).norm() > cfg.eps_thresh {
                    corrections.push((i, x));
                }
            }
        }
        if corrections.is_empty() {
            break;
        }
        if iterations == cfg.max_repulsion_iters {
            let penetration = cfg.delta_safe - min_clearance(&sdf, &prediction);
            return Err(ToolError::RepulsionFailed { iterations, penetration });
        }
        iterations += 1;
        let indices: Vec<usize> = corrections.iter().map(|c| c.0).collect();
        let mut vias = Vec::new();
        for run in runs(&indices) {
            for i in stride(&run, cfg.repulsion_points_per_run) {
                let x = corrections.iter().find(|c| c.0 == i).unwrap().1;
                let mut mean = prediction.positions[i].clone();
                mean.rows_mut(0, 3).copy_from(&x);
                vias.push(ViaPoint::isotropic(grid.value(i), mean, cfg.repulsion_variance));
            }
        }
        inserted += vias.len();
        current = insert_via_points(&current, &vias, Provenance::Repulsion)?;
        prediction = predict_mean(&current, grid)?;
    }
    let clearance = min_clearance(&sdf, &prediction);
    let what = label.clone().unwrap_or_else(|| "the obstacle".into());
    let summary = if inserted == 0 {
        format!("Trajectory already clears {what} by {clearance:.3} m; nothing changed")
    } else {
        format!(
            "Added {inserted} repulsion point(s) in {iterations} iteration(s); clearance from {what} {initial_clearance:.3} m -> {clearance:.3} m"
        )
    };
    Ok(ToolOutcome {
        reference: current,
        summary,
        resolved: json!({
            "obstacle": sdf,
            "label": label,
            "iterations": iterations,
            "points": inserted,
            "clearance_before": initial_clearance,
            "clearance_after": clearance,
        }),
        prediction: Some(prediction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmp::{KernelSpec, KmpHyperparams, ReferenceEntry};
    use crate::trajectory::{PhaseGrid, TimeProfile};

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn line_reference(n: usize, from: Vector3<f64>, to: Vector3<f64>, variance: f64) -> ReferenceDistribution {
        let grid = PhaseGrid::new(n).unwrap();
        let entries = (0..n)
            .map(|i| {
                let s = grid.value(i);
                let p = from + (to - from) * s;
                ReferenceEntry {
                    phase: s,
                    mean: DVector::from_column_slice(p.as_slice()),
                    covariance: DMatrix::identity(3, 3) * variance,
                    provenance: Provenance::Learned,
                }
            })
            .collect();
        ReferenceDistribution::new(
            entries,
            KernelSpec::default(),
            KmpHyperparams::default(),
            TimeProfile::uniform(10.0, n).unwrap(),
            n,
        )
        .unwrap()
    }

    fn env(objects: &[(&str, Vector3<f64>)]) -> EnvironmentModel {
        EnvironmentModel::new(
            objects
                .iter()
                .map(|(l, p)| EnvironmentObject { label: l.to_string(), position: (*p).into(), dimensions: [0.05; 3] })
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn sphere_sdf_values() {
        let s = Sdf::sphere(v(0.0, 0.0, 0.0), 1.0).unwrap();
        assert_eq!(s.eval(&v(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(s.eval(&v(0.0, 0.0, 0.0)), -1.0);
    }

    #[test]
    fn box_sdf_matches_paper_box() {
        let c = v(0.4, 0.1, 0.2);
        let b = Sdf::cuboid(c, v(0.075, 0.1125, 0.1175)).unwrap();
        assert!((b.eval(&(c + v(0.095, 0.0, 0.0))) - 0.02).abs() < 1e-12);
        // inside: largest negative clearance
        assert!((b.eval(&(c + v(0.05, 0.0, 0.0))) + 0.025).abs() < 1e-12);
        // corner region
        let corner = c + v(0.075 + 0.03, 0.1125 + 0.04, 0.0);
        assert!((b.eval(&corner) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sphere_projection_lands_on_margin() {
        let s = Sdf::sphere(v(0.1, -0.2, 0.3), 0.1).unwrap();
        let on_surface = v(0.2, -0.2, 0.3);
        let x = s.project(&on_surface, 0.02).unwrap();
        assert!((s.eval(&x) - 0.02).abs() < 1e-12);
        assert!(s.project(&v(0.1, -0.2, 0.3), 0.02).is_none());
    }

    #[test]
    fn box_projection_lands_on_margin() {
        let b = Sdf::cuboid(v(0.0, 0.0, 0.0), v(0.075, 0.1125, 0.1175)).unwrap();
        for p in [v(0.07, 0.01, 0.02), v(0.0, 0.0, 0.1), v(0.08, 0.115, 0.0), v(-0.01, -0.1, 0.05)] {
            let x = b.project(&p, 0.02).unwrap();
            assert!((b.eval(&x) - 0.02).abs() < 1e-6, "{p:?} -> {x:?}: {}", b.eval(&x));
        }
    }

    #[test]
    fn sdf_json_shape() {
        let s: Sdf = serde_json::from_str(r#"{"shape":"box","center":[0,0,0],"half_extents":[1,2,3]}"#).unwrap();
        assert!(matches!(s, Sdf::Cuboid { .. }));
        let t: Sdf = serde_json::from_str(r#"{"shape":"sphere","center":[0,0,0],"radius":0.1}"#).unwrap();
        assert!(matches!(t, Sdf::Sphere { .. }));
    }

    #[test]
    fn segment_between_two_objects() {
        let r = line_reference(101, v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let e = env(&[("box", v(0.55, 0.0, 0.0)), ("station", v(0.72, 0.0, 0.0))]);
        let seg = determine_segment(&traj, &e, &["station", "box"], None, &ToolConfig::default()).unwrap();
        assert!((seg.s_start - 0.55).abs() <= 0.01 && (seg.s_end - 0.72).abs() <= 0.01);
        let before = determine_segment(&traj, &e, &["box"], Some(Direction::Before), &ToolConfig::default()).unwrap();
        assert_eq!(before.s_start, 0.0);
    }

    #[test]
    fn far_object_is_rejected() {
        let r = line_reference(101, v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let e = env(&[("cup", v(0.5, 0.05, 0.0)), ("a", v(0.3, 0.0, 0.0)), ("b", v(0.3, 0.001, 0.0))]);
        let err = determine_segment(&traj, &e, &["cup", "a"], None, &ToolConfig::default()).unwrap_err();
        assert!(matches!(err, ToolError::ObjectNotOnTrajectory { .. }));
        assert!(err.to_string().contains("0.05"));
        let err = determine_segment(&traj, &e, &["a", "b"], None, &ToolConfig::default()).unwrap_err();
        assert!(matches!(err, ToolError::InvalidSegment { .. }));
        let err = determine_segment(&traj, &e, &["nothing"], Some(Direction::After), &ToolConfig::default());
        assert!(matches!(err, Err(ToolError::UnknownObject(_))));
    }

    #[test]
    fn speed_tool_scales_segment() {
        let r = line_reference(101, v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let args = SpeedArgs { gamma: 50.0, start: Some(PhaseOrLabel::Phase(0.55)), end: Some(PhaseOrLabel::Phase(0.72)) };
        let out = tool_speed(&r, &traj, &EnvironmentModel::default(), &args, &ToolConfig::default()).unwrap();
        assert!((out.reference.profile().total_duration() - 10.85).abs() < 1e-9);
        assert!(out.reference.same_geometry(&r));

        let bad = SpeedArgs { gamma: 50.0, start: Some(PhaseOrLabel::Phase(0.8)), end: Some(PhaseOrLabel::Phase(0.2)) };
        assert!(matches!(
            tool_speed(&r, &traj, &EnvironmentModel::default(), &bad, &ToolConfig::default()),
            Err(ToolError::InvalidSegment { .. })
        ));
        let fast = SpeedArgs { gamma: 500.0, start: None, end: None };
        let err = tool_speed(&r, &traj, &EnvironmentModel::default(), &fast, &ToolConfig::default()).unwrap_err();
        assert!(err.to_string().contains("200"));
    }

    #[test]
    fn via_point_count_rules() {
        assert_eq!(via_point_count(0.0, 0.02, 10), 1);
        assert_eq!(via_point_count(0.5, 0.02, 10), 10);
        assert_eq!(via_point_count(0.05, 0.02, 10), 3);
    }

    #[test]
    fn via_point_offset_from_current_point() {
        let r = line_reference(101, v(0.0, 0.0, 0.2), v(0.5, 0.0, 0.2), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let cfg = ToolConfig { dwell_time: 0.0, ..ToolConfig::default() };
        let args = ViaArgs { offset: Some(v(0.0, 0.10, 0.0)), s_hint: Some(0.5), ..ViaArgs::default() };
        let out = tool_via_point(&r, &traj, &EnvironmentModel::default(), &args, &cfg).unwrap();
        let expected = traj.point3(50) + v(0.0, 0.10, 0.0);
        let inserted: Vec<_> = out.reference.entries().iter().filter(|e| e.provenance == Provenance::ViaPoint).collect();
        assert_eq!(inserted.len(), 1);
        assert_eq!(inserted[0].mean.as_slice(), expected.as_slice());
    }

    #[test]
    fn via_point_outside_workspace_is_rejected() {
        let r = line_reference(21, v(0.0, 0.0, 0.2), v(0.5, 0.0, 0.2), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let args = ViaArgs { target: Some(ViaTarget::Position(v(10.0, 10.0, 10.0))), ..ViaArgs::default() };
        let err = tool_via_point(&r, &traj, &EnvironmentModel::default(), &args, &ToolConfig::default()).unwrap_err();
        assert!(matches!(err, ToolError::OutsideWorkspace { .. }));
    }

    #[test]
    fn via_point_pulls_prediction_to_object() {
        let r = line_reference(101, v(0.0, 0.0, 0.2), v(0.5, 0.0, 0.2), 1e-3);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let e = env(&[("camera", v(0.3, 0.03, 0.25))]);
        let args = ViaArgs { target: Some(ViaTarget::Label("Camera ".into())), ..ViaArgs::default() };
        let out = tool_via_point(&r, &traj, &e, &args, &ToolConfig::default()).unwrap();
        let after = predict_mean(&out.reference, out.reference.execution_grid()).unwrap();
        let (_, d) = nearest_in_range(&after, &v(0.3, 0.03, 0.25), 0, 100);
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn repulsion_clears_sphere() {
        let r = line_reference(101, v(-0.5, 0.01, 0.005), v(0.5, 0.01, 0.005), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let obstacle = ObstacleSpec::Shape(Sdf::sphere(v(0.0, 0.0, 0.0), 0.1).unwrap());
        let cfg = ToolConfig::default();
        let out = tool_repulsion(&r, &traj, &EnvironmentModel::default(), &obstacle, &cfg).unwrap();
        let after = predict_mean(&out.reference, r.execution_grid()).unwrap();
        let (sdf, _) = resolve_obstacle(&EnvironmentModel::default(), &obstacle).unwrap();
        assert!(min_clearance(&sdf, &after) >= cfg.delta_safe - 1e-3, "{}", min_clearance(&sdf, &after));
    }

    #[test]
    fn repulsion_without_collision_is_a_no_op() {
        let r = line_reference(51, v(-0.5, 0.5, 0.0), v(0.5, 0.5, 0.0), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let obstacle = ObstacleSpec::Shape(Sdf::sphere(v(0.0, 0.0, 0.0), 0.1).unwrap());
        let out = tool_repulsion(&r, &traj, &EnvironmentModel::default(), &obstacle, &ToolConfig::default()).unwrap();
        assert_eq!(out.reference, r);
    }

    #[test]
    fn repulsion_through_center_is_degenerate() {
        let r = line_reference(51, v(0.0, 0.0, 0.0), v(0.0, 0.0, 0.0), 1e-4);
        let traj = predict_mean(&r, r.execution_grid()).unwrap();
        let obstacle = ObstacleSpec::Shape(Sdf::sphere(v(0.0, 0.0, 0.0), 0.1).unwrap());
        let err = tool_repulsion(&r, &traj, &EnvironmentModel::default(), &obstacle, &ToolConfig::default());
        assert!(matches!(err, Err(ToolError::DegenerateDirection { .. })));
    }

    #[test]
    fn strided_selection_keeps_ends() {
        let run: Vec<usize> = (10..40).collect();
        let picked = stride(&run, Some(10));
        assert_eq!(picked.len(), 10);
        assert_eq!(picked[0], 10);
        assert_eq!(*picked.last().unwrap(), 39);
        assert_eq!(stride(&run, None), run);
    }
}
