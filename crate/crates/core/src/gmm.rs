//! Gaussian mixture fitting over joint `(phase, output)` data and Gaussian
//! mixture regression, which together produce the reference distribution a
//! KMP is initialized from.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kmp::{KernelSpec, KmpHyperparams, Provenance, ReferenceDistribution, ReferenceEntry};
use crate::trajectory::{normalize_demonstration, Demonstration, PhaseGrid, TimeProfile, TrajectoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("insufficient data: {points} points for {components} components")]
    InsufficientData { points: usize, components: usize },
    #[error("a mixture needs at least one component")]
    NoComponents,
    #[error("data point {index} has dimension {found}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("data point {0} contains a non-finite value")]
    NonFinite(usize),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("no demonstrations supplied")]
    NoDemonstrations,
    #[error("demonstrations disagree on output dimension")]
    MixedDimensions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Stop once the relative log-likelihood improvement falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Floor on covariance eigenvalues. Clipping is the exact M-step over
    /// covariances bounded below by this, so EM stays monotone.
    pub regularization: f64,
    pub kmeans_iterations: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 300, regularization: 1e-6, kmeans_iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
    /// Log-likelihood of the data under the parameters of each iteration;
    /// the last value belongs to the returned parameters.
    pub log_likelihood: Vec<f64>,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihood.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Precomputed density evaluator for one component.
struct Density {
    mean: DVector<f64>,
    /// Inverse of the lower Cholesky factor.
    whitening: DMatrix<f64>,
    log_norm: f64,
}

impl Density {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let mut jitter = 0.0;
        let chol = loop {
            let mut m = cov.clone();
            for i in 0..d {
                m[(i, i)] += jitter;
            }
            if let Some(c) = m.cholesky() {
                break c;
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        };
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let whitening = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("cholesky factor is invertible");
        Self {
            mean: mean.clone(),
            whitening,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        }
    }

    fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.whitening[(i, j)] * (x[j] - self.mean[j]);
            }
            q += acc * acc;
        }
        self.log_norm - 0.5 * q
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sample_covariance(points: &[&DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let diff = *p - mean;
        cov += &diff * diff.transpose();
    }
    cov / points.len() as f64
}

/// Raise every eigenvalue of the symmetric `m` to at least `floor`.
fn clip_eigenvalues(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.min() >= floor {
        return m;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// k-means++ seeding followed by Lloyd iterations; returns cluster centers.
fn kmeans_init(data: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng, iterations: usize) -> Vec<DVector<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = data.iter().map(|x| squared_distance(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(x, &centers[centers.len() - 1]));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(x, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assignment[i] != best.0 {
                assignment[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> =
                data.iter().zip(&assignment).filter(|(_, a)| **a == c).map(|(x, _)| x).collect();
            if !members.is_empty() {
                let mut sum = DVector::zeros(center.len());
                for m in &members {
                    sum += *m;
                }
                *center = sum / members.len() as f64;
            }
        }
    }
    centers
}

/// Fit a `k`-component full-covariance Gaussian mixture by EM.
///
/// Initialization is seeded k-means++ followed by Lloyd iterations, so the
/// result is a deterministic function of `(data, k, seed, config)`.
pub fn fit_gmm(data: &[DVector<f64>], k: usize, seed: u64, config: &EmConfig) -> Result<GmmModel, GmmError> {
    if k == 0 {
        return Err(GmmError::NoComponents);
    }
    if data.len() < k {
        return Err(GmmError::InsufficientData { points: data.len(), components: k });
    }
    let dim = data[0].len();
    for (i, x) in data.iter().enumerate() {
        if x.len() != dim {
            return Err(GmmError::DimensionMismatch { index: i, expected: dim, found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GmmError::NonFinite(i));
        }
    }
    let n = data.len();
    let eps = config.regularization;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_init(data, k, &mut rng, config.kmeans_iterations);

    let global_mean = data.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / n as f64;
    let all: Vec<&DVector<f64>> = data.iter().collect();
    let global_cov = sample_covariance(&all, &global_mean);

    // initial parameters from hard assignment to the nearest center
    let mut members: Vec<Vec<&DVector<f64>>> = vec![Vec::new(); k];
    for x in data {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = squared_distance(x, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        members[best.0].push(x);
    }
    let counts: Vec<f64> = members.iter().map(|m| m.len().max(1) as f64).collect();
    let count_total: f64 = counts.iter().sum();
    let mut components: Vec<GaussianComponent> = centers
        .iter()
        .zip(&members)
        .zip(&counts)
        .map(|((center, m), count)| {
            let covariance =
                clip_eigenvalues(if m.len() >= 2 { sample_covariance(m, center) } else { global_cov.clone() }, eps);
            GaussianComponent { weight: count / count_total, mean: center.clone(), covariance }
        })
        .collect();

    let mut history = Vec::new();
    let mut log_resp = vec![0.0; n * k];
    let mut row = vec![0.0; k];
    for iteration in 0.. {
        // E-step
        let densities: Vec<Density> =
            components.iter().map(|c| Density::new(&c.mean, &c.covariance)).collect();
        let log_weights: Vec<f64> = components.iter().map(|c| c.weight.ln()).collect();
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            for c in 0..k {
                row[c] = log_weights[c] + densities[c].log_pdf(x);
            }
            let norm = log_sum_exp(&row);
            ll += norm;
            for c in 0..k {
                log_resp[i * k + c] = row[c] - norm;
            }
        }
        let converged = history
            .last()
            .map(|prev: &f64| (ll - prev).abs() < config.tolerance * ll.abs().max(1.0))
            .unwrap_or(false);
        history.push(ll);
        if converged || iteration >= config.max_iterations {
            break;
        }

        // M-step
        for (c, comp) in components.iter_mut().enumerate() {
            let resp: Vec<f64> = (0..n).map(|i| log_resp[i * k + c].exp()).collect();
            let nk: f64 = resp.iter().sum();
            if nk < 1e-10 {
                // starved component: keep its shape, shrink its weight
                comp.weight = 1e-12;
                continue;
            }
            let mut mean = DVector::zeros(dim);
            for (x, r) in data.iter().zip(&resp) {
                mean.axpy(*r, x, 1.0);
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(dim, dim);
            for (x, r) in data.iter().zip(&resp) {
                let diff = x - &mean;
                cov.ger(*r, &diff, &diff, 1.0);
            }
            cov /= nk;
            cov = clip_eigenvalues((&cov + cov.transpose()) * 0.5, eps);
            comp.weight = nk / n as f64;
            comp.mean = mean;
            comp.covariance = cov;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for comp in &mut components {
            comp.weight /= total;
        }
    }

    Ok(GmmModel { components, log_likelihood: history })
}

/// Posterior responsibilities `h_k(s)` of each component for a scalar
/// input `s` (the first data dimension).
pub fn responsibilities(model: &GmmModel, s: f64) -> Vec<f64> {
    let logs: Vec<f64> = model
        .components
        .iter()
        .map(|c| {
            let var = c.covariance[(0, 0)].max(1e-12);
            let diff = s - c.mean[0];
            c.weight.ln() - 0.5 * ((2.0 * PI * var).ln() + diff * diff / var)
        })
        .collect();
    let norm = log_sum_exp(&logs);
    logs.iter().map(|l| (l - norm).exp()).collect()
}

/// Condition the joint mixture on input `s`, returning the output mean and
/// the total (law of total variance) output covariance.
pub fn gmr_condition(model: &GmmModel, s: f64) -> (DVector<f64>, DMatrix<f64>) {
    let out = model.dim() - 1;
    let h = responsibilities(model, s);
    let mut mean = DVector::zeros(out);
    let mut second = DMatrix::zeros(out, out);
    for (c, weight) in model.components.iter().zip(&h) {
        let var = c.covariance[(0, 0)].max(1e-12);
        let cross = c.covariance.view((1, 0), (out, 1)).column(0).into_owned();
        let cond_mean = c.mean.rows(1, out).into_owned() + &cross * ((s - c.mean[0]) / var);
        let cond_cov = c.covariance.view((1, 1), (out, out)).into_owned() - &cross * cross.transpose() / var;
        mean.axpy(*weight, &cond_mean, 1.0);
        second += (cond_cov + &cond_mean * cond_mean.transpose()) * *weight;
    }
    let cov = second - &mean * mean.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    (mean, cov)
}

/// Settings for learning a reference distribution from demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub components: usize,
    /// Number of reference entries `N`.
    pub reference_points: usize,
    /// Points each demonstration is resampled onto; also the execution grid
    /// the time profile lives on.
    pub resample_points: usize,
    pub seed: u64,
    pub em: EmConfig,
    pub kernel: KernelSpec,
    pub hyper: KmpHyperparams,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            components: 12,
            reference_points: 500,
            resample_points: 500,
            seed: 0,
            em: EmConfig::default(),
            kernel: KernelSpec::default(),
            hyper: KmpHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedModel {
    pub reference: ReferenceDistribution,
    pub gmm: GmmModel,
}

/// Normalize and pool all demonstrations, fit the mixture, and evaluate GMR
/// on a uniform `N`-point phase grid.
pub fn build_reference_distribution(
    demos: &[Demonstration],
    config: &LearnConfig,
) -> Result<LearnedModel, GmmError> {
    let first = demos.first().ok_or(GmmError::NoDemonstrations)?;
    let out = first.output_dim();
    if demos.iter().any(|d| d.output_dim() != out) {
        return Err(GmmError::MixedDimensions);
    }
    let grid = PhaseGrid::new(config.reference_points)?;
    let mut data = Vec::with_capacity(demos.len() * config.resample_points);
    let mut interval_sum = vec![0.0; config.resample_points - 1];
    for demo in demos {
        let (demo_grid, positions, profile) = normalize_demonstration(demo, config.resample_points)?;
        for (h, x) in positions.iter().enumerate() {
            let mut joint = DVector::zeros(out + 1);
            joint[0] = demo_grid.value(h);
            joint.rows_mut(1, out).copy_from(x);
            data.push(joint);
        }
        for (acc, dt) in interval_sum.iter_mut().zip(profile.intervals()) {
            *acc += dt;
        }
    }
    let profile = TimeProfile::new(interval_sum.iter().map(|v| v / demos.len() as f64).collect())?;
    let gmm = fit_gmm(&data, config.components, config.seed, &config.em)?;
    let entries = (0..grid.len())
        .map(|n| {
            let s = grid.value(n);
            let (mean, covariance) = gmr_condition(&gmm, s);
            ReferenceEntry { phase: s, mean, covariance, provenance: Provenance::Learned }
        })
        .collect();
    let reference = ReferenceDistribution::new(entries, config.kernel, config.hyper, profile, grid.len())
        .expect("GMR output satisfies reference invariants");
    Ok(LearnedModel { reference, gmm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(center: &[f64], spread: f64, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spread).unwrap();
        (0..n)
            .map(|_| DVector::from_iterator(center.len(), center.iter().map(|c| c + normal.sample(&mut rng))))
            .collect()
    }

    #[test]
    fn single_component_is_closed_form() {
        let data = cloud(&[0.5, 1.0, -1.0], 0.01, 200, 1);
        let model = fit_gmm(&data, 1, 3, &EmConfig::default()).unwrap();
        let n = data.len() as f64;
        let mean = data.iter().fold(DVector::zeros(3), |a, x| a + x) / n;
        let mut cov = DMatrix::zeros(3, 3);
        for x in &data {
            cov += (x - &mean) * (x - &mean).transpose();
        }
        cov /= n;
        let c = &model.components[0];
        assert!((c.weight - 1.0).abs() < 1e-12);
        assert!((&c.mean - &mean).amax() < 1e-9);
        assert!((&c.covariance - &cov).amax() < 1e-9);
    }

    #[test]
    fn eigenvalue_floor_only_lifts_small_directions() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-9]);
        let c = clip_eigenvalues(m.clone(), 1e-6);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15 && (c[(1, 1)] - 1e-6).abs() < 1e-15);
        let big = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(clip_eigenvalues(big.clone(), 1e-6), big);
    }

    #[test]
    fn separates_two_clusters() {
        let mut data = cloud(&[0.0, 0.0], 0.1, 100, 5);
        data.extend(cloud(&[5.0, 5.0], 0.1, 100, 6));
        let model = fit_gmm(&data, 2, 11, &EmConfig::default()).unwrap();
        let tol = 3.0 * 0.1 / 10.0;
        let mut found = [false, false];
        for c in &model.components {
            if (c.mean[0]).abs() < tol && (c.mean[1]).abs() < tol {
                found[0] = true;
            }
            if (c.mean[0] - 5.0).abs() < tol && (c.mean[1] - 5.0).abs() < tol {
                found[1] = true;
            }
        }
        assert_eq!(found, [true, true], "{:?}", model.components);
        // responsibilities saturate on own cluster
        let dens: Vec<Density> = model.components.iter().map(|c| Density::new(&c.mean, &c.covariance)).collect();
        for (i, x) in data.iter().enumerate() {
            let logs: Vec<f64> =
                model.components.iter().zip(&dens).map(|(c, d)| c.weight.ln() + d.log_pdf(x)).collect();
            let norm = log_sum_exp(&logs);
            let own = if i < 100 { 0 } else { 1 };
            let own_comp = model
                .components
                .iter()
                .position(|c| ((c.mean[0] - 5.0 * own as f64).abs()) < 1.0)
                .unwrap();
            assert!((logs[own_comp] - norm).exp() > 0.99);
        }
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let mut data = cloud(&[0.2, 0.0, 1.0], 0.3, 150, 9);
        data.extend(cloud(&[0.8, 1.0, 0.0], 0.2, 150, 10));
        let model = fit_gmm(&data, 4, 2, &EmConfig::default()).unwrap();
        for w in model.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-7, "{} -> {}", w[0], w[1]);
        }
        let total: f64 = model.components.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_too_few_points() {
        let data = cloud(&[0.0, 0.0], 1.0, 3, 0);
        assert_eq!(
            fit_gmm(&data, 4, 0, &EmConfig::default()).unwrap_err(),
            GmmError::InsufficientData { points: 3, components: 4 }
        );
    }

    #[test]
    fn fitting_is_deterministic() {
        let data = cloud(&[0.0, 1.0, 2.0], 0.5, 120, 4);
        let a = fit_gmm(&data, 3, 77, &EmConfig::default()).unwrap();
        let b = fit_gmm(&data, 3, 77, &EmConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_gaussian_gmr_matches_linear_regression() {
        let comp = GaussianComponent {
            weight: 1.0,
            mean: DVector::from_row_slice(&[0.4, 1.0, -2.0]),
            covariance: DMatrix::from_row_slice(3, 3, &[0.09, 0.03, -0.01, 0.03, 0.5, 0.1, -0.01, 0.1, 0.4]),
        };
        let model = GmmModel { components: vec![comp], log_likelihood: vec![] };
        for s in [0.0, 0.5, 1.0] {
            let (mu, cov) = gmr_condition(&model, s);
            // closed form: mu_y + S_ys / S_ss (s - mu_s)
            let expected = [1.0 + 0.03 / 0.09 * (s - 0.4), -2.0 - 0.01 / 0.09 * (s - 0.4)];
            assert!((mu[0] - expected[0]).abs() < 1e-12);
            assert!((mu[1] - expected[1]).abs() < 1e-12);
            assert!((cov[(0, 0)] - (0.5 - 0.03 * 0.03 / 0.09)).abs() < 1e-12);
            assert!((cov[(0, 1)] - (0.1 + 0.03 * 0.01 / 0.09)).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibilities_normalize_and_saturate() {
        let make = |ms: f64, my: f64| GaussianComponent {
            weight: 0.5,
            mean: DVector::from_row_slice(&[ms, my]),
            covariance: DMatrix::from_row_slice(2, 2, &[0.001, 0.0, 0.0, 0.01]),
        };
        let model = GmmModel { components: vec![make(0.1, 1.0), make(0.9, -1.0)], log_likelihood: vec![] };
        for s in [0.0, 0.3, 0.5, 0.77, 1.0] {
            let h = responsibilities(&model, s);
            assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (mu, _) = gmr_condition(&model, 0.1);
        assert!((mu[0] - 1.0).abs() < 1e-6);
    }
}
