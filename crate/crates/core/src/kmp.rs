//! Kernelized movement primitive: the reference distribution, the predictive
//! mean and covariance, via-point insertion and time-profile scaling.
//!
//! With `k(s, s')` a scalar kernel, `K` the `N·O × N·O` matrix of blocks
//! `k(s_n, s_m)·I`, `μ` the stacked reference means and `Σ` the
//! block-diagonal reference covariances, a query `s*` predicts
//!
//! ```text
//! mean = k*ᵀ (K + λ₁Σ)⁻¹ μ
//! cov  = α (k(s*, s*)·I − k*ᵀ (K + λ₂Σ)⁻¹ k*)
//! ```
//!
//! Every mutator returns a new [`ReferenceDistribution`]; inputs are never
//! modified.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{PhaseGrid, TimeProfile, Trajectory, TrajectoryError};

/// Diagonal jitter levels tried, in order, when a system is not numerically
/// positive definite.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KmpError {
    #[error("factorization failed after jitter levels {attempted:?}")]
    NumericalFailure { attempted: Vec<f64> },
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
    #[error("invalid segment [{start}, {end}): start must be below end, both in [0, 1]")]
    InvalidSegment { start: f64, end: f64 },
    #[error("invalid reference distribution: {0}")]
    InvalidReference(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern52,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
    pub signal_variance: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { family: KernelFamily::Matern52, length_scale: 0.1, signal_variance: 1.0 }
    }
}

impl KernelSpec {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let r = (a - b).abs();
        match self.family {
            KernelFamily::Matern52 => {
                let x = 5f64.sqrt() * r / self.length_scale;
                self.signal_variance * (1.0 + x + x * x / 3.0) * (-x).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmpHyperparams {
    /// Regularizer of the mean solve.
    pub lambda_mean: f64,
    /// Regularizer of the covariance solve.
    pub lambda_cov: f64,
    /// Output covariance scale.
    pub alpha: f64,
    /// Optional observation noise added to the kernel diagonal of both solves.
    #[serde(default)]
    pub observation_noise: f64,
}

impl Default for KmpHyperparams {
    fn default() -> Self {
        Self { lambda_mean: 0.1, lambda_cov: 1.0, alpha: 1.0, observation_noise: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Learned,
    ViaPoint,
    Repulsion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntry {
    pub phase: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub provenance: Provenance,
}

/// The KMP's internal state.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    entries: Vec<ReferenceEntry>,
    kernel: KernelSpec,
    hyper: KmpHyperparams,
    profile: TimeProfile,
    learned_grid_size: usize,
}

fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().all(|e| *e >= -1e-9)
}

impl ReferenceDistribution {
    pub fn new(
        entries: Vec<ReferenceEntry>,
        kernel: KernelSpec,
        hyper: KmpHyperparams,
        profile: TimeProfile,
        learned_grid_size: usize,
    ) -> Result<Self, KmpError> {
        if entries.is_empty() {
            return Err(KmpError::InvalidReference("no entries".into()));
        }
        if !(kernel.length_scale > 0.0) || !(kernel.signal_variance > 0.0) {
            return Err(KmpError::InvalidReference("kernel parameters must be positive".into()));
        }
        if !(hyper.lambda_mean > 0.0) || !(hyper.lambda_cov > 0.0) || !(hyper.alpha > 0.0) {
            return Err(KmpError::InvalidReference("lambda and alpha must be positive".into()));
        }
        if hyper.observation_noise < 0.0 {
            return Err(KmpError::InvalidReference("observation noise must be non-negative".into()));
        }
        if learned_grid_size < 2 {
            return Err(KmpError::InvalidReference("learned grid needs at least 2 points".into()));
        }
        let dim = entries[0].mean.len();
        for (i, e) in entries.iter().enumerate() {
            if e.mean.len() != dim || e.covariance.nrows() != dim {
                return Err(KmpError::InvalidReference(format!("entry {i} has inconsistent dimension")));
            }
            if !(0.0..=1.0).contains(&e.phase) {
                return Err(KmpError::InvalidReference(format!("entry {i} phase outside [0, 1]")));
            }
            if !is_symmetric_psd(&e.covariance) {
                return Err(KmpError::InvalidReference(format!("entry {i} covariance is not symmetric PSD")));
            }
            if e.mean.iter().any(|v| !v.is_finite()) {
                return Err(KmpError::InvalidReference(format!("entry {i} mean is not finite")));
            }
        }
        if entries.windows(2).any(|w| !(w[1].phase > w[0].phase)) {
            return Err(KmpError::InvalidReference("entry phases must be strictly increasing".into()));
        }
        Ok(Self { entries, kernel, hyper, profile, learned_grid_size })
    }

    pub fn entries(&self) -> &[ReferenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.entries[0].mean.len()
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn hyper(&self) -> &KmpHyperparams {
        &self.hyper
    }

    pub fn profile(&self) -> &TimeProfile {
        &self.profile
    }

    /// Grid the time profile is defined on; predictions for execution and
    /// collision checks use it.
    pub fn execution_grid(&self) -> PhaseGrid {
        self.profile.grid()
    }

    pub fn learned_grid_size(&self) -> usize {
        self.learned_grid_size
    }

    /// Half a learned grid cell: a via-point closer than this to an existing
    /// entry replaces it.
    pub fn replace_radius(&self) -> f64 {
        0.5 / (self.learned_grid_size - 1) as f64
    }

    pub fn with_profile(&self, profile: TimeProfile) -> Self {
        Self { profile, ..self.clone() }
    }

    /// True when both distributions have identical spatial entries, i.e.
    /// they predict the same positions.
    pub fn same_geometry(&self, other: &Self) -> bool {
        self.entries == other.entries && self.kernel == other.kernel && self.hyper == other.hyper
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == provenance).count()
    }
}

/// Kernel Gram matrix between two phase lists.
pub fn kernel_matrix(kernel: &KernelSpec, inputs_a: &[f64], inputs_b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(inputs_a.len(), inputs_b.len(), |i, j| kernel.eval(inputs_a[i], inputs_b[j]))
}

/// Factor `K + λΣ` (plus observation noise), walking the jitter ladder.
fn factorize(reference: &ReferenceDistribution, lambda: f64) -> Result<Cholesky<f64, Dyn>, KmpError> {
    let n = reference.len();
    let o = reference.output_dim();
    let phases: Vec<f64> = reference.entries.iter().map(|e| e.phase).collect();
    let gram = kernel_matrix(&reference.kernel, &phases, &phases);
    let mut base = DMatrix::zeros(n * o, n * o);
    for a in 0..n {
        for b in 0..n {
            let k = gram[(a, b)];
            for i in 0..o {
                base[(a * o + i, b * o + i)] = k;
            }
        }
        let cov = &reference.entries[a].covariance;
        for i in 0..o {
            for j in 0..o {
                base[(a * o + i, a * o + j)] += lambda * cov[(i, j)];
            }
            base[(a * o + i, a * o + i)] += reference.hyper.observation_noise;
        }
    }
    let mut attempted = Vec::new();
    for jitter in JITTER_LADDER {
        attempted.push(jitter);
        let mut m = base.clone();
        if jitter > 0.0 {
            for i in 0..n * o {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            return Ok(chol);
        }
    }
    Err(KmpError::NumericalFailure { attempted })
}

/// Per-entry weight vectors `(K + λ₁Σ)⁻¹ μ`, reusable across mean queries.
#[derive(Debug, Clone)]
pub struct MeanWeights {
    phases: Vec<f64>,
    weights: Vec<DVector<f64>>,
    kernel: KernelSpec,
}

impl MeanWeights {
    pub fn new(reference: &ReferenceDistribution) -> Result<Self, KmpError> {
        let o = reference.output_dim();
        let chol = factorize(reference, reference.hyper.lambda_mean)?;
        let stacked = DVector::from_iterator(
            reference.len() * o,
            reference.entries.iter().flat_map(|e| e.mean.iter().copied()),
        );
        let solved = chol.solve(&stacked);
        let weights = (0..reference.len()).map(|n| solved.rows(n * o, o).into_owned()).collect();
        Ok(Self {
            phases: reference.entries.iter().map(|e| e.phase).collect(),
            weights,
            kernel: reference.kernel,
        })
    }

    pub fn mean_at(&self, s: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.weights[0].len());
        for (phase, w) in self.phases.iter().zip(&self.weights) {
            out.axpy(self.kernel.eval(s, *phase), w, 1.0);
        }
        out
    }
}

/// Predicted means and (optionally) covariances at arbitrary phases.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub means: Vec<DVector<f64>>,
    pub covariances: Option<Vec<DMatrix<f64>>>,
}

fn predict_covariances(reference: &ReferenceDistribution, queries: &[f64]) -> Result<Vec<DMatrix<f64>>, KmpError> {
    let n = reference.len();
    let o = reference.output_dim();
    let chol = factorize(reference, reference.hyper.lambda_cov)?;
    let phases: Vec<f64> = reference.entries.iter().map(|e| e.phase).collect();
    let cross = kernel_matrix(&reference.kernel, &phases, queries);
    let mut rhs = DMatrix::zeros(n * o, queries.len() * o);
    for q in 0..queries.len() {
        for a in 0..n {
            for i in 0..o {
                rhs[(a * o + i, q * o + i)] = cross[(a, q)];
            }
        }
    }
    let half = chol.l().solve_lower_triangular(&rhs).expect("cholesky factor is invertible");
    let alpha = reference.hyper.alpha;
    Ok(queries
        .iter()
        .enumerate()
        .map(|(q, s)| {
            let block = half.columns(q * o, o);
            let mut cov = DMatrix::identity(o, o) * reference.kernel.eval(*s, *s) - block.transpose() * block;
            cov *= alpha;
            (&cov + cov.transpose()) * 0.5
        })
        .collect())
}

/// Mean (and covariance when `with_covariance`) at arbitrary query phases.
pub fn predict_at(
    reference: &ReferenceDistribution,
    queries: &[f64],
    with_covariance: bool,
) -> Result<Prediction, KmpError> {
    if let Some(q) = queries.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(KmpError::InvalidConstraint(format!("query phase {q} outside [0, 1]")));
    }
    let weights = MeanWeights::new(reference)?;
    let means = queries.iter().map(|s| weights.mean_at(*s)).collect();
    let covariances = if with_covariance { Some(predict_covariances(reference, queries)?) } else { None };
    Ok(Prediction { means, covariances })
}

fn to_trajectory(reference: &ReferenceDistribution, grid: PhaseGrid, prediction: Prediction) -> Result<Trajectory, KmpError> {
    Ok(Trajectory {
        grid,
        positions: prediction.means,
        covariances: prediction.covariances,
        profile: reference.profile.resample(grid.len())?,
    })
}

/// Full prediction (means and covariances) on a uniform grid, with the
/// time profile resampled onto it.
pub fn predict(reference: &ReferenceDistribution, grid: PhaseGrid) -> Result<Trajectory, KmpError> {
    let prediction = predict_at(reference, &grid.values(), true)?;
    to_trajectory(reference, grid, prediction)
}

/// Mean-only prediction on a uniform grid.
pub fn predict_mean(reference: &ReferenceDistribution, grid: PhaseGrid) -> Result<Trajectory, KmpError> {
    let prediction = predict_at(reference, &grid.values(), false)?;
    to_trajectory(reference, grid, prediction)
}

/// A via-point constraint `{s̄, μ̄, Σ̄}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViaPoint {
    pub phase: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl ViaPoint {
    pub fn isotropic(phase: f64, mean: DVector<f64>, variance: f64) -> Self {
        let dim = mean.len();
        Self { phase, mean, covariance: DMatrix::identity(dim, dim) * variance }
    }
}

fn check_via_point(reference: &ReferenceDistribution, via: &ViaPoint) -> Result<(), KmpError> {
    if !(0.0..=1.0).contains(&via.phase) {
        return Err(KmpError::InvalidConstraint(format!("via-point phase {} outside [0, 1]", via.phase)));
    }
    let o = reference.output_dim();
    if via.mean.len() != o || via.covariance.nrows() != o || via.covariance.ncols() != o {
        return Err(KmpError::InvalidConstraint(format!("via-point dimension does not match output dimension {o}")));
    }
    if via.mean.iter().any(|v| !v.is_finite()) {
        return Err(KmpError::InvalidConstraint("via-point mean is not finite".into()));
    }
    if !is_symmetric_psd(&via.covariance) {
        return Err(KmpError::InvalidConstraint("via-point covariance is not symmetric PSD".into()));
    }
    Ok(())
}

/// Insert via-points in order. Each one replaces the nearest entry when it
/// lies strictly inside [`ReferenceDistribution::replace_radius`], and is
/// otherwise inserted in phase order.
pub fn insert_via_points(
    reference: &ReferenceDistribution,
    vias: &[ViaPoint],
    provenance: Provenance,
) -> Result<ReferenceDistribution, KmpError> {
    for via in vias {
        check_via_point(reference, via)?;
    }
    let mut out = reference.clone();
    // relative slack keeps exact half-cell midpoints on the "insert" side
    let radius = out.replace_radius() * (1.0 - 1e-9);
    for via in vias {
        let entry = ReferenceEntry {
            phase: via.phase,
            mean: via.mean.clone(),
            covariance: (&via.covariance + via.covariance.transpose()) * 0.5,
            provenance,
        };
        let pos = out.entries.partition_point(|e| e.phase < via.phase);
        let nearest = [pos.checked_sub(1), (pos < out.entries.len()).then_some(pos)]
            .into_iter()
            .flatten()
            .min_by(|a, b| {
                let da = (out.entries[*a].phase - via.phase).abs();
                let db = (out.entries[*b].phase - via.phase).abs();
                da.partial_cmp(&db).unwrap().then(a.cmp(b))
            });
        match nearest {
            Some(i) if (out.entries[i].phase - via.phase).abs() < radius => out.entries[i] = entry,
            _ => out.entries.insert(pos, entry),
        }
    }
    Ok(out)
}

pub fn insert_via_point(
    reference: &ReferenceDistribution,
    phase: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
) -> Result<ReferenceDistribution, KmpError> {
    insert_via_points(reference, &[ViaPoint { phase, mean, covariance }], Provenance::ViaPoint)
}

/// Interval scale factor for a speed change of `gamma` percent: positive
/// values slow down (longer intervals), negative values speed up.
pub fn speed_factor(gamma: f64) -> f64 {
    if gamma >= 0.0 {
        (gamma.abs() + 100.0) / 100.0
    } else {
        100.0 / (gamma.abs() + 100.0)
    }
}

/// Multiply every interval whose left grid point lies in
/// `[s_start, s_end)` by [`speed_factor`]`(gamma)`. Spatial entries are
/// untouched.
pub fn scale_time_profile(
    reference: &ReferenceDistribution,
    s_start: f64,
    s_end: f64,
    gamma: f64,
) -> Result<ReferenceDistribution, KmpError> {
    if !(s_start < s_end) || s_start < 0.0 || s_end > 1.0 {
        return Err(KmpError::InvalidSegment { start: s_start, end: s_end });
    }
    if !gamma.is_finite() {
        return Err(KmpError::InvalidConstraint(format!("speed change {gamma} is not finite")));
    }
    let factor = speed_factor(gamma);
    let grid = reference.profile.grid();
    let intervals = reference
        .profile
        .intervals()
        .iter()
        .enumerate()
        .map(|(h, dt)| {
            let s = grid.value(h);
            if s_start <= s && s < s_end {
                dt * factor
            } else {
                *dt
            }
        })
        .collect();
    Ok(reference.with_profile(TimeProfile::new(intervals)?))
}
