#![allow(dead_code)]

//! Test-side oracles and builders shared by the integration targets.

use std::path::PathBuf;

use kmpadapt::gmm::{build_reference_distribution, LearnConfig, LearnedModel};
use kmpadapt::io::{load_demonstrations, load_environment};
use kmpadapt::kmp::{KernelFamily, KernelSpec, KmpHyperparams, Provenance, ReferenceDistribution, ReferenceEntry};
use kmpadapt::trajectory::{EnvironmentModel, PhaseGrid, TimeProfile};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// The shipped bearing-ring demonstrations learned with default settings,
/// and the shipped environment placed on them.
pub fn shipped_fixture() -> (LearnedModel, EnvironmentModel) {
    let demos: Vec<_> = load_demonstrations(&data_dir().join("demos")).unwrap().into_iter().map(|(_, d)| d).collect();
    let model = build_reference_distribution(&demos, &LearnConfig::default()).unwrap();
    let env = load_environment(&data_dir().join("bearing_ring_env.json")).unwrap();
    (model, env)
}

pub fn matern52(length: f64, variance: f64, a: f64, b: f64) -> f64 {
    let d = (a - b).abs() * 5f64.sqrt() / length;
    variance * (-d).exp() * (1.0 + d + d * d / 3.0)
}

// Error-free transformations for compensated dot products.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Dot product evaluated in roughly twice the working precision.
fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, e) = two_prod(*x, *y);
        let (t, f) = two_sum(s, p);
        s = t;
        c += e + f;
    }
    s + c
}

/// Solve `A X = B` by Gaussian elimination with partial pivoting followed by
/// iterative refinement with compensated residuals.
fn solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let cols = b[0].len();
    let mut lu: Vec<Vec<f64>> = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| lu[i][k].abs().total_cmp(&lu[j][k].abs())).unwrap();
        lu.swap(k, p);
        perm.swap(k, p);
        for i in k + 1..n {
            let f = lu[i][k] / lu[k][k];
            lu[i][k] = f;
            for j in k + 1..n {
                lu[i][j] -= f * lu[k][j];
            }
        }
    }
    let back = |rhs: &[f64]| -> Vec<f64> {
        let mut y: Vec<f64> = perm.iter().map(|&i| rhs[i]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= lu[i][j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= lu[i][j] * y[j];
            }
            y[i] /= lu[i][i];
        }
        y
    };
    let mut out = vec![vec![0.0; cols]; n];
    for c in 0..cols {
        let rhs: Vec<f64> = b.iter().map(|r| r[c]).collect();
        let mut x = back(&rhs);
        for _ in 0..3 {
            let r: Vec<f64> = (0..n)
                .map(|i| {
                    let mut row = a[i].clone();
                    row.push(-1.0);
                    let mut xs = x.clone();
                    xs.push(rhs[i]);
                    -dot2(&row, &xs)
                })
                .collect();
            let dx = back(&r);
            for (xi, d) in x.iter_mut().zip(dx) {
                *xi += d;
            }
        }
        for i in 0..n {
            out[i][c] = x[i];
        }
    }
    out
}

/// Dense evaluation of the KMP mean and covariance at `s` with the full
/// `NO x NO` block system.
pub fn dense_kmp(reference: &ReferenceDistribution, s: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let kern = reference.kernel();
    assert_eq!(kern.family, KernelFamily::Matern52);
    let hyper = reference.hyper();
    let e = reference.entries();
    let (n, o) = (e.len(), reference.output_dim());
    let k = |a: f64, b: f64| matern52(kern.length_scale, kern.signal_variance, a, b);
    let system = |lambda: f64| -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n * o]; n * o];
        for i in 0..n {
            for j in 0..n {
                let kij = k(e[i].phase, e[j].phase);
                for d in 0..o {
                    m[i * o + d][j * o + d] += kij;
                }
            }
            for r in 0..o {
                for c in 0..o {
                    m[i * o + r][i * o + c] += lambda * e[i].covariance[(r, c)];
                }
                m[i * o + r][i * o + r] += hyper.observation_noise;
            }
        }
        m
    };
    // k* as an (NO x O) block column
    let kstar: Vec<Vec<f64>> = (0..n * o)
        .map(|row| {
            let (i, d) = (row / o, row % o);
            (0..o).map(|c| if c == d { k(e[i].phase, s) } else { 0.0 }).collect()
        })
        .collect();
    let mu: Vec<Vec<f64>> = (0..n * o).map(|row| vec![e[row / o].mean[row % o]]).collect();
    let w = solve(&system(hyper.lambda_mean), &mu);
    let mean: Vec<f64> =
        (0..o).map(|d| dot2(&kstar.iter().map(|r| r[d]).collect::<Vec<_>>(), &w.iter().map(|r| r[0]).collect::<Vec<_>>())).collect();
    let z = solve(&system(hyper.lambda_cov), &kstar);
    let kss = k(s, s);
    let cov = (0..o)
        .map(|r| {
            (0..o)
                .map(|c| {
                    let q = dot2(&kstar.iter().map(|row| row[r]).collect::<Vec<_>>(), &z.iter().map(|row| row[c]).collect::<Vec<_>>());
                    hyper.alpha * (if r == c { kss } else { 0.0 } - q)
                })
                .collect()
        })
        .collect();
    (mean, cov)
}

/// Random reference: `n` sorted phases, smooth-ish means, random SPD
/// covariances, random hyperparameters.
pub fn random_reference<R: Rng>(rng: &mut R, n: usize, o: usize) -> ReferenceDistribution {
    let mut phases: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    phases.sort_by(f64::total_cmp);
    phases.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    let entries = phases
        .iter()
        .map(|&s| {
            let b = DMatrix::from_fn(o, o, |_, _| rng.random_range(-0.1..0.1));
            let cov = &b * b.transpose() + DMatrix::identity(o, o) * rng.random_range(1e-4..1e-2);
            ReferenceEntry {
                phase: s,
                mean: DVector::from_fn(o, |d, _| (3.0 * s + d as f64).sin() * 0.3 + rng.random_range(-0.01..0.01)),
                covariance: cov,
                provenance: Provenance::Learned,
            }
        })
        .collect();
    let kernel = KernelSpec {
        family: KernelFamily::Matern52,
        length_scale: rng.random_range(0.05..0.5),
        signal_variance: rng.random_range(0.5..2.0),
    };
    let hyper = KmpHyperparams {
        lambda_mean: rng.random_range(0.05..1.0),
        lambda_cov: rng.random_range(0.5..2.0),
        alpha: rng.random_range(0.5..2.0),
        observation_noise: 0.0,
    };
    ReferenceDistribution::new(entries, kernel, hyper, TimeProfile::uniform(5.0, 50).unwrap(), 50).unwrap()
}

/// Straight-line reference from `from` to `to` with isotropic covariance.
pub fn line_reference(n: usize, from: Vector3<f64>, to: Vector3<f64>, variance: f64) -> ReferenceDistribution {
    let grid = PhaseGrid::new(n).unwrap();
    let entries = (0..n)
        .map(|i| {
            let s = grid.value(i);
            ReferenceEntry {
                phase: s,
                mean: DVector::from_column_slice((from + (to - from) * s).as_slice()),
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

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
