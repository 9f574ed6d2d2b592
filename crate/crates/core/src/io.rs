//! File formats: CSV demonstrations, JSON environments, model files, eval
//! corpora, session snapshots and plot data.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{EnvSource, EvalCase};
use crate::gmm::{LearnConfig, LearnedModel};
use crate::kmp::{
    predict_at, KernelSpec, KmpError, KmpHyperparams, Provenance, ReferenceDistribution, ReferenceEntry,
};
use crate::session::{SessionState, TraceEvent};
use crate::tools::Sdf;
use crate::trajectory::{Demonstration, EnvironmentModel, TimeProfile, Trajectory};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Points a snapshot carries at most.
pub const SNAPSHOT_POINTS: usize = 200;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse { path: PathBuf, line: Option<usize>, message: String },
    #[error("no demonstrations in {0}")]
    NoDemonstrations(PathBuf),
    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Kmp(#[from] KmpError),
}

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|source| IoError::Read { path: path.into(), source })
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::Write { path: path.into(), source })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn json_error(path: &Path, e: serde_json::Error) -> IoError {
    IoError::Parse { path: path.into(), line: Some(e.line()), message: e.to_string() }
}

/// One demonstration file: header `t,<output columns...>`, then one sample
/// per row.
pub fn parse_demonstration(path: &Path, text: &str) -> Result<Demonstration, IoError> {
    let err = |line: Option<usize>, message: String| IoError::Parse { path: path.into(), line, message };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(Some(1), e.to_string()))?.clone();
    if headers.len() < 2 || &headers[0] != "t" {
        return Err(err(Some(1), format!("expected header `t,x,y,z`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let dim = headers.len() - 1;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| err(e.position().map(|p| p.line() as usize), e.to_string()))?;
        let line = record.position().map(|p| p.line() as usize);
        let values = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(line, format!("not a number: `{f}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "non-finite value".into()));
        }
        samples.push((values[0], DVector::from_column_slice(&values[1..=dim])));
    }
    Demonstration::new(samples).map_err(|e| err(None, e.to_string()))
}

pub fn write_demonstration(path: &Path, demo: &Demonstration) -> Result<(), IoError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(["x", "y", "z"].iter().take(demo.output_dim()).map(|s| s.to_string()));
    header.extend((3..demo.output_dim()).map(|i| format!("x{i}")));
    let io = |e: csv::Error| IoError::Write { path: path.into(), source: e.into() };
    writer.write_record(&header).map_err(io)?;
    for (t, x) in demo.times().iter().zip(demo.outputs()) {
        let row: Vec<String> = std::iter::once(*t).chain(x.iter().copied()).map(|v| v.to_string()).collect();
        writer.write_record(&row).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| IoError::Write { path: path.into(), source: e.into_error() })?;
    write_file(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoChecksum {
    pub file: String,
    pub sha256: String,
}

/// Every `*.csv` in `dir`, sorted by file name.
pub fn load_demonstrations(dir: &Path) -> Result<Vec<(DemoChecksum, Demonstration)>, IoError> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::Read { path: dir.into(), source })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(IoError::NoDemonstrations(dir.into()));
    }
    files
        .iter()
        .map(|path| {
            let text = read(path)?;
            let demo = parse_demonstration(path, &text)?;
            let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((DemoChecksum { file, sha256: sha256_hex(text.as_bytes()) }, demo))
        })
        .collect()
}

pub fn load_environment(path: &Path) -> Result<EnvironmentModel, IoError> {
    let env: EnvironmentModel = serde_json::from_str(&read(path)?).map_err(|e| json_error(path, e))?;
    env.validate().map_err(|e| IoError::Parse { path: path.into(), line: None, message: e.to_string() })?;
    Ok(env)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub s: f64,
    pub mu: Vec<f64>,
    /// Row-major.
    pub sigma: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub kernel: KernelSpec,
    pub hyper: KmpHyperparams,
    pub learned_grid_size: usize,
    /// Execution-grid time intervals, seconds.
    pub intervals: Vec<f64>,
    pub entries: Vec<EntryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnMetadata {
    pub components: usize,
    pub reference_points: usize,
    pub resample_points: usize,
    pub seed: u64,
    pub final_log_likelihood: Option<f64>,
    pub demos: Vec<DemoChecksum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub reference: ReferenceRecord,
    pub metadata: LearnMetadata,
}

impl ModelFile {
    pub fn new(reference: &ReferenceDistribution, metadata: LearnMetadata) -> Self {
        let entries = reference
            .entries()
            .iter()
            .map(|e| EntryRecord {
                s: e.phase,
                mu: e.mean.iter().copied().collect(),
                sigma: e.covariance.transpose().iter().copied().collect(),
                provenance: e.provenance,
            })
            .collect();
        Self {
            format_version: MODEL_FORMAT_VERSION,
            reference: ReferenceRecord {
                kernel: *reference.kernel(),
                hyper: *reference.hyper(),
                learned_grid_size: reference.learned_grid_size(),
                intervals: reference.profile().intervals().to_vec(),
                entries,
            },
            metadata,
        }
    }

    pub fn from_learned(model: &LearnedModel, config: &LearnConfig, demos: Vec<DemoChecksum>) -> Self {
        Self::new(
            &model.reference,
            LearnMetadata {
                components: config.components,
                reference_points: config.reference_points,
                resample_points: config.resample_points,
                seed: config.seed,
                final_log_likelihood: Some(model.gmm.final_log_likelihood()),
                demos,
            },
        )
    }

    /// Same metadata, different distribution (after adaptation).
    pub fn with_reference(&self, reference: &ReferenceDistribution) -> Self {
        Self::new(reference, self.metadata.clone())
    }

    pub fn reference(&self) -> Result<ReferenceDistribution, IoError> {
        let r = &self.reference;
        let entries = r
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d = e.mu.len();
                if e.sigma.len() != d * d {
                    return Err(IoError::InvalidModel(format!("entry {i}: sigma has {} values, expected {}", e.sigma.len(), d * d)));
                }
                Ok(ReferenceEntry {
                    phase: e.s,
                    mean: DVector::from_column_slice(&e.mu),
                    covariance: DMatrix::from_row_slice(d, d, &e.sigma),
                    provenance: e.provenance,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let profile = TimeProfile::new(r.intervals.clone()).map_err(|e| IoError::InvalidModel(e.to_string()))?;
        Ok(ReferenceDistribution::new(entries, r.kernel, r.hyper, profile, r.learned_grid_size)?)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string(self).expect("serializable model");
        text.push('\n');
        text
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self, IoError> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
        if v.format_version != MODEL_FORMAT_VERSION {
            return Err(IoError::Version { found: v.format_version, expected: MODEL_FORMAT_VERSION });
        }
        let file: Self = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
        file.reference()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_json(path, &read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_file(path, self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    #[serde(default)]
    pub description: Option<String>,
    /// Environment for cases that name none, relative to the corpus file.
    #[serde(default)]
    pub env: Option<String>,
    pub cases: Vec<EvalCase>,
}

/// Cases with their environments resolved. A case's own environment wins,
/// then the corpus default, then `fallback`. Paths resolve against the
/// corpus file's directory.
pub fn load_corpus(
    path: &Path,
    fallback: Option<&EnvironmentModel>,
) -> Result<Vec<(EvalCase, EnvironmentModel)>, IoError> {
    let corpus: CorpusFile = serde_json::from_str(&read(path)?).map_err(|e| json_error(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let default_env = match &corpus.env {
        Some(p) => Some(load_environment(&base.join(p))?),
        None => fallback.cloned(),
    };
    corpus
        .cases
        .into_iter()
        .enumerate()
        .map(|(i, case)| {
            let env = match &case.env {
                None => default_env.clone().ok_or_else(|| IoError::Parse {
                    path: path.into(),
                    line: None,
                    message: format!("case {i} has no environment and no default is given"),
                })?,
                Some(EnvSource::Inline(env)) => {
                    env.validate().map_err(|e| IoError::Parse { path: path.into(), line: None, message: e.to_string() })?;
                    env.clone()
                }
                Some(EnvSource::Path(p)) => load_environment(&base.join(p))?,
            };
            Ok((case, env))
        })
        .collect()
}

/// Evenly spaced indices, first and last included, at most `max` of them.
pub fn downsample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|k| ((k as f64) * (len - 1) as f64 / (max - 1) as f64).round() as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub phases: Vec<f64>,
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    /// Trace of the predicted covariance at each point.
    pub covariance_traces: Vec<f64>,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub turn: usize,
    pub entries: usize,
    pub via_points: usize,
    pub repulsion_points: usize,
    pub env: EnvironmentModel,
    pub prediction: PredictionSummary,
    pub trace_tail: Vec<TraceEvent>,
}

pub fn summarize_prediction(
    reference: &ReferenceDistribution,
    prediction: &Trajectory,
    max_points: usize,
) -> Result<PredictionSummary, KmpError> {
    let idx = downsample_indices(prediction.len(), max_points);
    let phases: Vec<f64> = idx.iter().map(|i| prediction.grid.value(*i)).collect();
    let cov = predict_at(reference, &phases, true)?.covariances.expect("requested covariances");
    let cumulative = prediction.profile.cumulative();
    Ok(PredictionSummary {
        times: idx.iter().map(|i| cumulative[*i]).collect(),
        positions: idx.iter().map(|i| prediction.positions[*i].iter().copied().collect()).collect(),
        covariance_traces: cov.iter().map(|c| c.trace()).collect(),
        duration: prediction.duration(),
        phases,
    })
}

pub fn snapshot(id: &str, state: &SessionState, tail: usize) -> Result<SessionSnapshot, KmpError> {
    let events = &state.trace.events;
    Ok(SessionSnapshot {
        session_id: id.to_string(),
        turn: state.turn,
        entries: state.reference.len(),
        via_points: state.reference.count(Provenance::ViaPoint),
        repulsion_points: state.reference.count(Provenance::Repulsion),
        env: state.env.clone(),
        prediction: summarize_prediction(&state.reference, state.prediction(), SNAPSHOT_POINTS)?,
        trace_tail: events[events.len().saturating_sub(tail)..].to_vec(),
    })
}

/// Horizontal SDF slice through an obstacle's center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfSlice {
    pub label: String,
    pub sdf: Sdf,
    pub z: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[j][i]` is the distance at `(xs[i], ys[j], z)`.
    pub values: Vec<Vec<f64>>,
}

impl SdfSlice {
    pub fn new(label: &str, sdf: &Sdf, half_width: f64, cells: usize) -> Self {
        let c = sdf.center();
        let axis = |o: f64| -> Vec<f64> {
            (0..=cells).map(|k| o - half_width + 2.0 * half_width * k as f64 / cells as f64).collect()
        };
        let (xs, ys) = (axis(c[0]), axis(c[1]));
        let values = ys.iter().map(|y| xs.iter().map(|x| sdf.eval(&Vector3::new(*x, *y, c[2]))).collect()).collect();
        Self { label: label.into(), sdf: *sdf, z: c[2], xs, ys, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub before: PredictionSummary,
    pub after: PredictionSummary,
    pub obstacles: Vec<SdfSlice>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmp::{insert_via_point, KernelSpec};

    fn small_reference() -> ReferenceDistribution {
        let entries = (0..5)
            .map(|i| {
                let s = i as f64 / 4.0;
                ReferenceEntry {
                    phase: s,
                    mean: DVector::from_vec(vec![s, 0.1 * s * s, -0.3 + s / 3.0]),
                    covariance: DMatrix::from_row_slice(3, 3, &[2e-4, 1e-5, 0.0, 1e-5, 3e-4, 2e-6, 0.0, 2e-6, 1e-4]),
                    provenance: Provenance::Learned,
                }
            })
            .collect();
        let profile = TimeProfile::uniform(1.7, 9).unwrap();
        ReferenceDistribution::new(entries, KernelSpec::default(), KmpHyperparams::default(), profile, 5).unwrap()
    }

    fn metadata() -> LearnMetadata {
        LearnMetadata {
            components: 2,
            reference_points: 5,
            resample_points: 9,
            seed: 3,
            final_log_likelihood: Some(-1.0 / 3.0),
            demos: vec![DemoChecksum { file: "a.csv".into(), sha256: sha256_hex(b"abc") }],
        }
    }

    #[test]
    fn sha256_matches_known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn model_round_trip_is_byte_identical() {
        let reference = small_reference();
        let adapted = insert_via_point(&reference, 0.3, DVector::from_vec(vec![0.01, 0.2, 1.0 / 7.0]), DMatrix::identity(3, 3) * 1e-6).unwrap();
        let file = ModelFile::new(&adapted, metadata());
        let text = file.to_json();
        let loaded = ModelFile::from_json(Path::new("m.json"), &text).unwrap();
        assert_eq!(loaded.to_json(), text);
        assert_eq!(loaded.reference().unwrap(), adapted);
        assert_eq!(ModelFile::new(&loaded.reference().unwrap(), metadata()).to_json(), text);
    }

    #[test]
    fn sigma_is_row_major() {
        let mut reference = small_reference();
        let e = reference.entries()[0].clone();
        let mut cov = e.covariance.clone();
        cov[(0, 1)] = 3e-5;
        cov[(1, 0)] = 3e-5;
        cov[(0, 2)] = 7e-6;
        cov[(2, 0)] = 7e-6;
        let mut entries = reference.entries().to_vec();
        entries[0].covariance = cov;
        reference = ReferenceDistribution::new(entries, *reference.kernel(), *reference.hyper(), reference.profile().clone(), 5).unwrap();
        let file = ModelFile::new(&reference, metadata());
        assert_eq!(&file.reference.entries[0].sigma[..3], &[2e-4, 3e-5, 7e-6]);
    }

    #[test]
    fn version_gate() {
        let text = ModelFile::new(&small_reference(), metadata()).to_json().replacen("\"format_version\":1", "\"format_version\":2", 1);
        match ModelFile::from_json(Path::new("m.json"), &text) {
            Err(IoError::Version { found: 2, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_model_is_rejected() {
        let mut file = ModelFile::new(&small_reference(), metadata());
        file.reference.entries[1].sigma.pop();
        assert!(matches!(ModelFile::from_json(Path::new("m.json"), &file.to_json()), Err(IoError::InvalidModel(_))));
        let mut file = ModelFile::new(&small_reference(), metadata());
        file.reference.entries[1].s = 0.0;
        assert!(matches!(ModelFile::from_json(Path::new("m.json"), &file.to_json()), Err(IoError::Kmp(_))));
    }

    #[test]
    fn csv_parses_and_reports_lines() {
        let ok = "t,x,y,z\n0,0,0,0\n0.5, 1, 2, 3\n1,2,3,4\n";
        let demo = parse_demonstration(Path::new("d.csv"), ok).unwrap();
        assert_eq!(demo.len(), 3);
        assert_eq!(demo.outputs()[1].as_slice(), &[1.0, 2.0, 3.0]);

        let bad = "t,x,y,z\n0,0,0,0\n0.5,1,oops,3\n";
        let e = parse_demonstration(Path::new("d.csv"), bad).unwrap_err();
        assert!(matches!(e, IoError::Parse { line: Some(3), .. }), "{e:?}");
        assert!(e.to_string().starts_with("d.csv:3:"));

        let short = "t,x,y,z\n0,0,0,0\n0.5,1,2\n";
        assert!(matches!(parse_demonstration(Path::new("d.csv"), short), Err(IoError::Parse { line: Some(3), .. })));

        let header = "time,x,y,z\n0,0,0,0\n";
        assert!(matches!(parse_demonstration(Path::new("d.csv"), header), Err(IoError::Parse { line: Some(1), .. })));

        let order = "t,x\n0,0\n0,1\n";
        assert!(parse_demonstration(Path::new("d.csv"), order).is_err());
    }

    #[test]
    fn downsampling_keeps_ends() {
        assert_eq!(downsample_indices(5, 200), vec![0, 1, 2, 3, 4]);
        let idx = downsample_indices(500, 200);
        assert_eq!(idx.len(), 200);
        assert_eq!((idx[0], idx[199]), (0, 499));
        assert!(idx.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sdf_slice_has_zero_crossing() {
        let sdf = Sdf::sphere(Vector3::new(0.0, 0.0, 0.2), 0.1).unwrap();
        let slice = SdfSlice::new("ball", &sdf, 0.2, 40);
        assert_eq!(slice.values.len(), 41);
        assert!((slice.values[20][20] + 0.1).abs() < 1e-12);
        assert!(slice.values[0][0] > 0.0);
    }
}
