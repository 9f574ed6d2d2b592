//! The interactive adaptation loop: predict, prompt, select tools, validate
//! and apply, re-predict, report.
//!
//! A turn applies the calls of one model response in order, each against the
//! distribution left by the previous one. The response is committed as a
//! whole; if any call is rejected or fails, the partial result is discarded
//! and the model is asked again with the failure text, up to
//! `SessionConfig::retries` times.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::kmp::{predict_mean, KmpError, ReferenceDistribution};
use crate::llm::{Backend, ChatTurn, CompletionRequest, LlmError, PromptContext};
use crate::registry::{dispatch, DispatchOutcome, RegistryError, TaskProfile, ToolCall, ToolRegistry, ValidationReport};
use crate::tools::ToolConfig;
use crate::trajectory::{EnvironmentModel, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error(transparent)]
    Kmp(#[from] KmpError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid environment: {0}")]
    Environment(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub tools: ToolConfig,
    /// Extra model queries after a rejected or failed response.
    pub retries: usize,
    pub profile: TaskProfile,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { tools: ToolConfig::default(), retries: 1, profile: TaskProfile::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Applied,
    /// Succeeded on its own but discarded with the rest of its response.
    RolledBack,
    Responded,
    Rejected,
    Failed,
    /// Not attempted because an earlier call of the response failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call: ToolCall,
    pub status: CallStatus,
    pub mutating: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
    pub message: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub resolved: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub assistant: Option<ChatTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
    pub calls: Vec<CallRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub turn: usize,
    pub instruction: String,
    pub attempts: Vec<Attempt>,
    pub ok: bool,
    pub feedback: String,
    /// More than one mutating call in the committed response.
    pub multi_tool: bool,
    pub duration_s: f64,
}

impl TraceEvent {
    /// Calls that changed the distribution.
    pub fn applied(&self) -> impl Iterator<Item = &CallRecord> {
        self.attempts.iter().flat_map(|a| &a.calls).filter(|c| c.status == CallStatus::Applied)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionTrace {
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub reference: ReferenceDistribution,
    pub env: EnvironmentModel,
    pub trace: SessionTrace,
    pub config: SessionConfig,
    pub turn: usize,
    registry: ToolRegistry,
    /// Mean prediction of `reference` on its execution grid.
    prediction: Trajectory,
}

impl SessionState {
    pub fn new(
        reference: ReferenceDistribution,
        env: EnvironmentModel,
        config: SessionConfig,
    ) -> Result<Self, SessionError> {
        env.validate().map_err(|e| SessionError::Environment(e.to_string()))?;
        let registry = ToolRegistry::for_profile(&config.profile, &config.tools)?;
        let prediction = predict_mean(&reference, reference.execution_grid())?;
        Ok(Self { reference, env, trace: SessionTrace::default(), config, turn: 0, registry, prediction })
    }

    /// Same model and prediction, different environment, empty trace.
    pub fn with_env(&self, env: EnvironmentModel) -> Result<Self, SessionError> {
        env.validate().map_err(|e| SessionError::Environment(e.to_string()))?;
        Ok(Self { env, trace: SessionTrace::default(), turn: 0, ..self.clone() })
    }

    pub fn prediction(&self) -> &Trajectory {
        &self.prediction
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }
}

/// Outcome of one turn as reported to the user.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TurnOutcome {
    pub ok: bool,
    pub feedback: String,
    pub multi_tool: bool,
}

struct Committed {
    reference: ReferenceDistribution,
    prediction: Option<Trajectory>,
    feedback: String,
}

fn current_prediction(
    reference: &ReferenceDistribution,
    cached: &mut Option<Trajectory>,
) -> Result<Trajectory, KmpError> {
    if cached.is_none() {
        *cached = Some(predict_mean(reference, reference.execution_grid())?);
    }
    Ok(cached.clone().unwrap())
}

/// Apply the calls of one response. Returns the records and, when every call
/// went through, the new distribution.
fn apply_response(state: &SessionState, calls: &[ToolCall]) -> (Vec<CallRecord>, Option<Committed>) {
    let mut records = Vec::new();
    let mut reference = state.reference.clone();
    let mut prediction = Some(state.prediction.clone());
    let mut messages = Vec::new();
    let mut failed = false;
    for call in calls {
        let mutating = state.registry.get(&call.name).is_some_and(|t| t.kind.is_mutating());
        if failed {
            records.push(CallRecord {
                call: call.clone(),
                status: CallStatus::Skipped,
                mutating,
                validation: None,
                message: "not attempted after an earlier failure".into(),
                resolved: Value::Null,
            });
            continue;
        }
        let traj = match current_prediction(&reference, &mut prediction) {
            Ok(t) => t,
            Err(e) => {
                failed = true;
                records.push(CallRecord {
                    call: call.clone(),
                    status: CallStatus::Failed,
                    mutating,
                    validation: None,
                    message: format!("prediction failed: {e}"),
                    resolved: Value::Null,
                });
                continue;
            }
        };
        let outcome = dispatch(call, &reference, &traj, &state.env, &state.config.tools, &state.registry);
        let message = outcome.feedback().to_string();
        let record = match outcome {
            DispatchOutcome::Applied { outcome, .. } => {
                let same_geometry = outcome.reference.same_geometry(&reference);
                prediction = match outcome.prediction {
                    Some(p) => Some(p),
                    None if same_geometry => prediction.map(|mut p| {
                        p.profile = outcome.reference.profile().resample(p.len()).unwrap_or(p.profile);
                        p
                    }),
                    None => None,
                };
                reference = outcome.reference;
                messages.push(message.clone());
                CallRecord {
                    call: call.clone(),
                    status: CallStatus::Applied,
                    mutating,
                    validation: None,
                    message,
                    resolved: outcome.resolved,
                }
            }
            DispatchOutcome::Responded { text } => {
                messages.push(text.clone());
                CallRecord {
                    call: call.clone(),
                    status: CallStatus::Responded,
                    mutating: false,
                    validation: None,
                    message,
                    resolved: Value::Null,
                }
            }
            DispatchOutcome::Rejected { report, .. } => {
                failed = true;
                CallRecord {
                    call: call.clone(),
                    status: CallStatus::Rejected,
                    mutating,
                    validation: Some(report),
                    message,
                    resolved: Value::Null,
                }
            }
            DispatchOutcome::Failed { .. } => {
                failed = true;
                CallRecord {
                    call: call.clone(),
                    status: CallStatus::Failed,
                    mutating,
                    validation: None,
                    message,
                    resolved: Value::Null,
                }
            }
        };
        records.push(record);
    }
    if failed {
        for r in records.iter_mut().filter(|r| r.status == CallStatus::Applied) {
            r.status = CallStatus::RolledBack;
        }
        return (records, None);
    }
    let feedback = messages.join("\n");
    (records, Some(Committed { reference, prediction, feedback }))
}

fn retry_turns(turn: &ChatTurn, records: &[CallRecord]) -> Vec<ChatTurn> {
    let mut out = vec![turn.clone()];
    for r in records {
        out.push(ChatTurn::tool(r.call.id.clone(), r.message.clone()));
    }
    out.push(ChatTurn::user("Some tool calls failed; correct them using the feedback above."));
    out
}

/// Run one instruction through the loop. The input state is not modified;
/// the returned state carries the new distribution (unchanged on failure)
/// and one more trace event.
pub fn run_turn(
    state: &SessionState,
    instruction: &str,
    backend: &dyn Backend,
) -> Result<(SessionState, TurnOutcome), SessionError> {
    if instruction.trim().is_empty() {
        return Err(SessionError::EmptyInstruction);
    }
    let started = Instant::now();
    let context = PromptContext::new(instruction, &state.env, &state.prediction);
    let schemas = state.registry.serialize_schemas()?;
    let mut history: Vec<ChatTurn> = Vec::new();
    let mut attempts = Vec::new();
    let mut committed = None;
    let mut failure_feedback = String::new();
    for _ in 0..=state.config.retries {
        let request = CompletionRequest { context: &context, env: &state.env, history: &history, schemas: &schemas };
        let turn = match backend.complete(&request) {
            Ok(turn) => turn,
            Err(e) => {
                failure_feedback = match &e {
                    LlmError::BackendUnavailable(_) => format!("The language model is unavailable: {e}"),
                    _ => format!("The language model reply could not be used: {e}"),
                };
                attempts.push(Attempt { assistant: None, backend_error: Some(e.to_string()), calls: vec![] });
                // transport failures are not retried
                if matches!(e, LlmError::BackendUnavailable(_)) {
                    break;
                }
                continue;
            }
        };
        if turn.tool_calls.is_empty() {
            let text = turn.content.clone().unwrap_or_default();
            attempts.push(Attempt { assistant: Some(turn), backend_error: None, calls: vec![] });
            committed = Some(Committed { reference: state.reference.clone(), prediction: None, feedback: text });
            break;
        }
        let (records, result) = apply_response(state, &turn.tool_calls);
        let attempt = Attempt { assistant: Some(turn.clone()), backend_error: None, calls: records.clone() };
        attempts.push(attempt);
        match result {
            Some(c) => {
                committed = Some(c);
                break;
            }
            None => {
                failure_feedback = records
                    .iter()
                    .filter(|r| matches!(r.status, CallStatus::Rejected | CallStatus::Failed))
                    .map(|r| r.message.clone())
                    .collect::<Vec<_>>()
                    .join("\n");
                history.extend(retry_turns(&turn, &records));
            }
        }
    }

    let mut next = state.clone();
    next.turn += 1;
    let (ok, feedback) = match committed {
        Some(c) => {
            let geometry_changed = !c.reference.same_geometry(&state.reference);
            next.prediction = match c.prediction {
                Some(p) => p,
                None if geometry_changed => predict_mean(&c.reference, c.reference.execution_grid())?,
                None => {
                    let mut p = state.prediction.clone();
                    p.profile = c.reference.profile().resample(p.len()).map_err(KmpError::from)?;
                    p
                }
            };
            next.reference = c.reference;
            (true, c.feedback)
        }
        None => (false, failure_feedback),
    };
    let multi_tool = ok
        && attempts
            .last()
            .map(|a| a.calls.iter().filter(|c| c.mutating && c.status == CallStatus::Applied).count() > 1)
            .unwrap_or(false);
    next.trace.events.push(TraceEvent {
        turn: next.turn,
        instruction: instruction.to_string(),
        attempts,
        ok,
        feedback: feedback.clone(),
        multi_tool,
        duration_s: started.elapsed().as_secs_f64(),
    });
    Ok((next, TurnOutcome { ok, feedback, multi_tool }))
}
