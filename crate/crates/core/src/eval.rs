//! Scoring of adaptation turns (CSR, ISR, TCR, response time) and corpus
//! runs.
//!
//! - CSR: the turn finished without an execution error or an unhandled
//!   rejection.
//! - ISR: the applied mutating tools are exactly the expected set and every
//!   parameter predicate holds.
//! - TCR: every task predicate holds on the adapted prediction.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::llm::Backend;
use crate::registry::RESPOND_TOOL;
use crate::session::{run_turn, SessionState, TraceEvent};
use crate::tools::Sdf;
use crate::trajectory::{normalize_label, EnvironmentModel, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamPredicate {
    InRange([f64; 2]),
    Equals(Value),
    /// Case-insensitive label comparison.
    Label(String),
}

impl ParamPredicate {
    pub fn holds(&self, value: Option<&Value>) -> bool {
        let Some(value) = value else { return false };
        match self {
            ParamPredicate::InRange([lo, hi]) => value.as_f64().is_some_and(|x| x >= *lo && x <= *hi),
            ParamPredicate::Equals(expected) => match (expected.as_f64(), value.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => expected == value,
            },
            ParamPredicate::Label(label) => {
                value.as_str().is_some_and(|s| normalize_label(s) == normalize_label(label))
            }
        }
    }
}

/// Obstacle reference in a task predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObstacleRef {
    Label(String),
    Shape(Sdf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPredicate {
    /// Some grid point within `tol` of the point or labeled object.
    ReachesPoint {
        #[serde(default)]
        point: Option<[f64; 3]>,
        #[serde(default)]
        label: Option<String>,
        tol: f64,
    },
    /// Every grid point at least `delta` from the obstacle surface.
    AvoidsSdf { obstacle: ObstacleRef, delta: f64 },
    DurationIn { min: f64, max: f64 },
    /// Start and end within `tol` of the unadapted prediction's.
    EndpointPreserved { tol: f64 },
}

impl TaskPredicate {
    pub fn holds(&self, adapted: &Trajectory, original: &Trajectory, env: &EnvironmentModel) -> bool {
        match self {
            TaskPredicate::ReachesPoint { point, label, tol } => {
                let target = match (point, label) {
                    (Some(p), _) => Vector3::from(*p),
                    (None, Some(l)) => match env.find(l) {
                        Some(o) => o.position(),
                        None => return false,
                    },
                    (None, None) => return false,
                };
                (0..adapted.len()).any(|i| (adapted.point3(i) - target).norm() <= *tol)
            }
            TaskPredicate::AvoidsSdf { obstacle, delta } => {
                let sdf = match obstacle {
                    ObstacleRef::Label(l) => match env.find(l) {
                        Some(o) => Sdf::from_object(o),
                        None => return false,
                    },
                    ObstacleRef::Shape(s) => *s,
                };
                (0..adapted.len()).all(|i| sdf.eval(&adapted.point3(i)) >= *delta)
            }
            TaskPredicate::DurationIn { min, max } => {
                let d = adapted.duration();
                d >= *min && d <= *max
            }
            TaskPredicate::EndpointPreserved { tol } => {
                let last = adapted.len() - 1;
                adapted.len() == original.len()
                    && (adapted.point3(0) - original.point3(0)).norm() <= *tol
                    && (adapted.point3(last) - original.point3(last)).norm() <= *tol
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Expectation {
    /// Mutating tools that must be applied; nothing else may be.
    #[serde(default)]
    pub tools: Vec<String>,
    /// Per tool name, per parameter.
    #[serde(default)]
    pub params: BTreeMap<String, BTreeMap<String, ParamPredicate>>,
    #[serde(default)]
    pub task: Vec<TaskPredicate>,
}

impl Expectation {
    pub fn is_empty(&self) -> bool {
        self.tools.is_empty() && self.params.is_empty() && self.task.is_empty()
    }
}

/// Inline environment or a path relative to the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSource {
    Inline(EnvironmentModel),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    #[serde(default)]
    pub id: Option<String>,
    pub instruction: String,
    #[serde(default)]
    pub env: Option<EnvSource>,
    pub expect: Expectation,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub csr: u8,
    pub isr: u8,
    pub tcr: u8,
    pub duration_s: f64,
}

/// Score one turn. `original` is the prediction before the turn, `adapted`
/// the one after it.
pub fn score_case(
    case: &EvalCase,
    event: &TraceEvent,
    original: &Trajectory,
    adapted: &Trajectory,
    env: &EnvironmentModel,
) -> CaseScore {
    let csr = event.ok;
    let applied: Vec<_> = if event.ok { event.applied().filter(|c| c.mutating).collect() } else { vec![] };
    let used: BTreeSet<&str> = applied.iter().map(|c| c.call.name.as_str()).collect();
    let expected: BTreeSet<&str> =
        case.expect.tools.iter().map(|t| t.as_str()).filter(|t| *t != RESPOND_TOOL).collect();
    let params_ok = case.expect.params.iter().all(|(tool, preds)| {
        let calls: Vec<_> = applied.iter().filter(|c| &c.call.name == tool).collect();
        !calls.is_empty()
            && calls.iter().all(|c| preds.iter().all(|(name, p)| p.holds(c.call.arguments.get(name))))
    });
    let isr = event.ok && used == expected && params_ok;
    let tcr = case.expect.task.iter().all(|t| t.holds(adapted, original, env));
    CaseScore { csr: csr as u8, isr: isr as u8, tcr: tcr as u8, duration_s: event.duration_s }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case: usize,
    pub id: Option<String>,
    pub category: String,
    pub run: usize,
    pub instruction: String,
    pub score: CaseScore,
    pub tools: Vec<String>,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub executions: usize,
    pub csr: f64,
    pub isr: f64,
    pub tcr: f64,
    pub mean_response_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: usize,
    pub categories: Vec<CategoryReport>,
    pub results: Vec<CaseResult>,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

impl EvalReport {
    fn from_results(runs: usize, results: Vec<CaseResult>) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in &results {
            if !order.contains(&r.category) {
                order.push(r.category.clone());
            }
        }
        let categories = order
            .into_iter()
            .map(|category| {
                let rows: Vec<_> = results.iter().filter(|r| r.category == category).collect();
                let n = rows.len();
                let sum = |f: fn(&CaseScore) -> u8| rows.iter().map(|r| f(&r.score) as usize).sum::<usize>();
                CategoryReport {
                    category,
                    executions: n,
                    csr: percent(sum(|s| s.csr), n),
                    isr: percent(sum(|s| s.isr), n),
                    tcr: percent(sum(|s| s.tcr), n),
                    mean_response_s: rows.iter().map(|r| r.score.duration_s).sum::<f64>() / n.max(1) as f64,
                }
            })
            .collect();
        Self { runs, categories, results }
    }

    pub fn category(&self, name: &str) -> Option<&CategoryReport> {
        self.categories.iter().find(|c| c.category == name)
    }

    /// Plain-text table, one row per category.
    pub fn render_table(&self) -> String {
        let width = self.categories.iter().map(|c| c.category.len()).max().unwrap_or(8).max(8);
        let mut out = format!(
            "{:<width$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>8}\n",
            "Category", "Runs", "CSR (%)", "ISR (%)", "TCR (%)", "Time (s)"
        );
        out.push_str(&"-".repeat(width + 46));
        out.push('\n');
        for c in &self.categories {
            out.push_str(&format!(
                "{:<width$}  {:>5}  {:>7.1}  {:>7.1}  {:>7.1}  {:>8.3}\n",
                c.category, c.executions, c.csr, c.isr, c.tcr, c.mean_response_s
            ));
        }
        out
    }
}

/// Run every case `runs` times, each from `pristine` with the case's
/// environment. Cases run in parallel; results keep corpus order.
pub fn run_corpus(
    pristine: &SessionState,
    cases: &[(EvalCase, EnvironmentModel)],
    runs: usize,
    backend: &dyn Backend,
) -> EvalReport {
    let jobs: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (0..runs).map(move |r| (c, r))).collect();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<CaseResult>> = vec![None; jobs.len()];
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(c, run)) = jobs.get(j) else { break };
                let result = run_case(pristine, c, &cases[c].0, &cases[c].1, run, backend);
                done.lock().unwrap()[j] = Some(result);
            });
        }
    });
    EvalReport::from_results(runs, slots.into_iter().map(|s| s.expect("every job ran")).collect())
}

fn run_case(
    pristine: &SessionState,
    index: usize,
    case: &EvalCase,
    env: &EnvironmentModel,
    run: usize,
    backend: &dyn Backend,
) -> CaseResult {
    let base = |feedback: String| CaseResult {
        case: index,
        id: case.id.clone(),
        category: case.category.clone(),
        run,
        instruction: case.instruction.clone(),
        score: CaseScore { csr: 0, isr: 0, tcr: 0, duration_s: 0.0 },
        tools: vec![],
        feedback,
    };
    let state = match pristine.with_env(env.clone()) {
        Ok(s) => s,
        Err(e) => return base(e.to_string()),
    };
    match run_turn(&state, &case.instruction, backend) {
        Ok((next, outcome)) => {
            let event = next.trace.events.last().expect("turn appends an event");
            let score = score_case(case, event, state.prediction(), next.prediction(), env);
            CaseResult {
                score,
                tools: event.applied().map(|c| c.call.name.clone()).collect(),
                feedback: outcome.feedback,
                ..base(String::new())
            }
        }
        Err(e) => base(e.to_string()),
    }
}
