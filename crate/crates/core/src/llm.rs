//! Language-model backends: an HTTP client for the chat-completions
//! function-calling protocol and a rule-driven mock for offline runs.

use std::path::Path;
use std::time::Duration;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::registry::{ToolCall, RESPOND_TOOL};
use crate::trajectory::{nearest_grid_index, normalize_label, EnvironmentModel, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("protocol error: {message}")]
    Protocol { message: String, body: String },
    #[error("cannot resolve placeholder {placeholder}: {message}")]
    RuleResolution { placeholder: String, message: String },
    #[error("invalid rule file: {0}")]
    RuleFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, content: Some(text.into()), tool_calls: vec![], tool_call_id: None }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, content: Some(text.into()), tool_calls: vec![], tool_call_id: None }
    }

    pub fn assistant(content: Option<String>, tool_calls: Vec<ToolCall>) -> Self {
        Self { role: Role::Assistant, content, tool_calls, tool_call_id: None }
    }

    pub fn tool(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { role: Role::Tool, content: Some(text.into()), tool_calls: vec![], tool_call_id: Some(id.into()) }
    }

    /// Wire form used by chat-completions endpoints; tool arguments travel
    /// as JSON-encoded strings.
    pub fn to_wire(&self) -> Value {
        let mut m = Map::new();
        let role = match self.role {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        };
        m.insert("role".into(), json!(role));
        m.insert("content".into(), self.content.clone().map(Value::String).unwrap_or(Value::Null));
        if !self.tool_calls.is_empty() {
            let calls: Vec<Value> = self
                .tool_calls
                .iter()
                .map(|c| {
                    json!({
                        "id": c.id,
                        "type": "function",
                        "function": {"name": c.name, "arguments": encode_arguments(&c.arguments)},
                    })
                })
                .collect();
            m.insert("tool_calls".into(), Value::Array(calls));
        }
        if let Some(id) = &self.tool_call_id {
            m.insert("tool_call_id".into(), json!(id));
        }
        Value::Object(m)
    }
}

fn encode_arguments(arguments: &Value) -> String {
    match arguments {
        // unparsable arguments are kept verbatim as a string
        Value::String(raw) => raw.clone(),
        other => other.to_string(),
    }
}

pub const SYSTEM_PREAMBLE: &str = "You adapt a robot manipulation skill learned from demonstrations. \
The user describes a change in natural language; answer by calling the provided tools. \
Prefer exactly one tool per request and only use more than one when the request clearly asks for several \
changes. Never change the speed unless the user asks for it. \
Positions are in meters in the robot base frame: +x forward, +y left, +z up. \
Phases are normalized time from 0 (start) to 1 (end). \
Refer to objects by their labels exactly as listed. \
If the request is unclear or impossible, call RespondToUser instead of guessing.";

/// Everything the model sees for one instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_preamble: String,
    pub environment: String,
    pub instruction: String,
    pub synopsis: String,
}

/// One line per object plus the free-text description.
pub fn render_environment(env: &EnvironmentModel) -> String {
    let mut lines: Vec<String> = env
        .objects
        .iter()
        .map(|o| {
            format!(
                "{}: position [{:.3}, {:.3}, {:.3}] m, dimensions [{:.3}, {:.3}, {:.3}] m",
                o.label,
                o.position[0],
                o.position[1],
                o.position[2],
                o.dimensions[0],
                o.dimensions[1],
                o.dimensions[2]
            )
        })
        .collect();
    if let Some(d) = &env.description {
        lines.push(d.clone());
    }
    lines.join("\n")
}

/// Duration, endpoints and where the trajectory passes each object.
pub fn render_synopsis(traj: &Trajectory, env: &EnvironmentModel) -> String {
    let first = traj.point3(0);
    let last = traj.point3(traj.len() - 1);
    let mut lines = vec![
        format!("duration {:.2} s over {} points", traj.duration(), traj.len()),
        format!(
            "start [{:.3}, {:.3}, {:.3}] m, end [{:.3}, {:.3}, {:.3}] m",
            first[0], first[1], first[2], last[0], last[1], last[2]
        ),
    ];
    for o in &env.objects {
        let (i, d) = nearest_grid_index(traj, &o.position());
        lines.push(format!("closest to {} at phase {:.3} (distance {:.3} m)", o.label, traj.grid.value(i), d));
    }
    lines.join("\n")
}

impl PromptContext {
    pub fn new(instruction: &str, env: &EnvironmentModel, traj: &Trajectory) -> Self {
        Self {
            system_preamble: SYSTEM_PREAMBLE.into(),
            environment: render_environment(env),
            instruction: instruction.into(),
            synopsis: render_synopsis(traj, env),
        }
    }

    pub fn messages(&self) -> Vec<ChatTurn> {
        let system = format!(
            "{}\n\nEnvironment:\n{}\n\nCurrent trajectory:\n{}",
            self.system_preamble, self.environment, self.synopsis
        );
        vec![ChatTurn::system(system), ChatTurn::user(self.instruction.clone())]
    }
}

pub struct CompletionRequest<'a> {
    pub context: &'a PromptContext,
    pub env: &'a EnvironmentModel,
    /// Turns after the initial prompt (earlier replies and tool feedback).
    pub history: &'a [ChatTurn],
    pub schemas: &'a Value,
}

impl CompletionRequest<'_> {
    pub fn messages(&self) -> Vec<ChatTurn> {
        let mut m = self.context.messages();
        m.extend(self.history.iter().cloned());
        m
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<ChatTurn, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitTemplate {
    pub tool: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default)]
    pub name: Option<String>,
    /// Case-insensitive regular expression over the instruction.
    #[serde(rename = "match")]
    pub pattern: String,
    /// Minimum number of environment labels the instruction must mention.
    #[serde(default)]
    pub requires_labels: usize,
    pub emit: Vec<EmitTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub fallback: Option<String>,
}

#[derive(Debug, Clone)]
struct Rule {
    spec: RuleSpec,
    regex: Regex,
}

/// Deterministic stand-in for a language model. Rules are tried in order;
/// the first whose pattern matches (and whose label requirement holds)
/// emits its templates. Without a match the backend answers with
/// `RespondToUser`.
///
/// Template strings may contain placeholders:
/// `$label`, `$label1`, `$label2` (environment labels in order of mention),
/// `$pos(x)` (object position, `x` a label or `$labelN`), `$cap(n)`,
/// `$num(n)`, `$negnum(n)` (regex capture group as text or number), and
/// `$cm(n)`, `$negcm(n)` (capture in centimeters, emitted in meters).
/// A string consisting of one placeholder becomes a typed JSON value.
#[derive(Debug, Clone)]
pub struct MockBackend {
    rules: Vec<Rule>,
    fallback: String,
}

const DEFAULT_FALLBACK: &str = "I did not understand that request. Please describe the change you want.";

impl MockBackend {
    pub fn new(file: RuleFile) -> Result<Self, LlmError> {
        let rules = file
            .rules
            .into_iter()
            .map(|spec| {
                let regex = RegexBuilder::new(&spec.pattern)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| LlmError::RuleFile(format!("pattern '{}': {e}", spec.pattern)))?;
                if spec.emit.is_empty() {
                    return Err(LlmError::RuleFile(format!("rule '{}' emits nothing", spec.pattern)));
                }
                Ok(Rule { spec, regex })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rules, fallback: file.fallback.unwrap_or_else(|| DEFAULT_FALLBACK.into()) })
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        Self::new(serde_json::from_str(text).map_err(|e| LlmError::RuleFile(e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::RuleFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Tool calls for `instruction`; the core of [`Backend::complete`].
    pub fn respond(&self, instruction: &str, env: &EnvironmentModel) -> Result<Vec<ToolCall>, LlmError> {
        let labels = mentioned_labels(instruction, env);
        for rule in &self.rules {
            let Some(caps) = rule.regex.captures(instruction) else { continue };
            if labels.len() < rule.spec.requires_labels {
                continue;
            }
            let groups: Vec<Option<String>> = caps.iter().map(|m| m.map(|m| m.as_str().to_string())).collect();
            let ctx = Resolver { env, labels: &labels, groups: &groups };
            return rule
                .spec
                .emit
                .iter()
                .enumerate()
                .map(|(i, t)| Ok(ToolCall::new(format!("call_{i}"), t.tool.clone(), ctx.value(&t.arguments)?)))
                .collect();
        }
        Ok(vec![ToolCall::new("call_0", RESPOND_TOOL, json!({ "text": self.fallback }))])
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<ChatTurn, LlmError> {
        let calls = self.respond(&request.context.instruction, request.env)?;
        Ok(ChatTurn::assistant(None, calls))
    }
}

/// Environment labels mentioned in `text`, ordered by first mention. Longer
/// labels win where mentions overlap ("blue box" over "box").
pub fn mentioned_labels(text: &str, env: &EnvironmentModel) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut hits: Vec<(usize, usize, String)> = Vec::new();
    for o in &env.objects {
        let key = normalize_label(&o.label);
        let pattern = format!(r"\b{}\b", regex::escape(&key));
        let re = Regex::new(&pattern).expect("escaped label is a valid pattern");
        if let Some(m) = re.find(&lower) {
            hits.push((m.start(), m.end(), o.label.clone()));
        }
    }
    hits.sort_by(|a, b| a.0.cmp(&b.0).then((b.1 - b.0).cmp(&(a.1 - a.0))));
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    for h in hits {
        if out.iter().any(|o| h.0 < o.1 && o.0 < h.1) {
            continue;
        }
        out.push(h);
    }
    out.into_iter().map(|h| h.2).collect()
}

struct Resolver<'a> {
    env: &'a EnvironmentModel,
    labels: &'a [String],
    groups: &'a [Option<String>],
}

fn placeholder_regex() -> Regex {
    Regex::new(r"\$(label[12]?|pos|cap|num|negnum|cm|negcm)(?:\(([^()]*)\))?").expect("static pattern")
}

impl Resolver<'_> {
    fn value(&self, template: &Value) -> Result<Value, LlmError> {
        Ok(match template {
            Value::String(s) => self.string(s)?,
            Value::Array(items) => Value::Array(items.iter().map(|v| self.value(v)).collect::<Result<_, _>>()?),
            Value::Object(map) => {
                let mut out = Map::new();
                for (k, v) in map {
                    out.insert(k.clone(), self.value(v)?);
                }
                Value::Object(out)
            }
            other => other.clone(),
        })
    }

    fn string(&self, s: &str) -> Result<Value, LlmError> {
        let re = placeholder_regex();
        if let Some(m) = re.find(s) {
            if m.start() == 0 && m.end() == s.len() {
                let caps = re.captures(s).unwrap();
                return self.resolve(&caps[0], &caps[1], caps.get(2).map(|a| a.as_str()));
            }
        }
        let mut out = String::new();
        let mut last = 0;
        for caps in re.captures_iter(s) {
            let whole = caps.get(0).unwrap();
            out.push_str(&s[last..whole.start()]);
            let v = self.resolve(whole.as_str(), &caps[1], caps.get(2).map(|a| a.as_str()))?;
            match v {
                Value::String(t) => out.push_str(&t),
                other => out.push_str(&other.to_string()),
            }
            last = whole.end();
        }
        out.push_str(&s[last..]);
        Ok(Value::String(out))
    }

    fn err(placeholder: &str, message: impl Into<String>) -> LlmError {
        LlmError::RuleResolution { placeholder: placeholder.into(), message: message.into() }
    }

    fn label(&self, placeholder: &str, which: &str) -> Result<String, LlmError> {
        let index = match which {
            "label" | "label1" => 0,
            _ => 1,
        };
        self.labels
            .get(index)
            .cloned()
            .ok_or_else(|| Self::err(placeholder, format!("instruction mentions only {} object(s)", self.labels.len())))
    }

    fn group(&self, placeholder: &str, arg: Option<&str>) -> Result<String, LlmError> {
        let n: usize = arg
            .and_then(|a| a.trim().parse().ok())
            .ok_or_else(|| Self::err(placeholder, "expected a capture group number"))?;
        self.groups
            .get(n)
            .cloned()
            .flatten()
            .ok_or_else(|| Self::err(placeholder, format!("capture group {n} did not match")))
    }

    fn number(&self, placeholder: &str, arg: Option<&str>) -> Result<f64, LlmError> {
        let text = self.group(placeholder, arg)?;
        text.trim().parse().map_err(|_| Self::err(placeholder, format!("'{text}' is not a number")))
    }

    fn resolve(&self, placeholder: &str, kind: &str, arg: Option<&str>) -> Result<Value, LlmError> {
        match kind {
            "label" | "label1" | "label2" => Ok(json!(self.label(placeholder, kind)?)),
            "pos" => {
                let raw = arg.ok_or_else(|| Self::err(placeholder, "expected $pos(label)"))?.trim();
                let name = match raw {
                    "$label" | "$label1" | "$label2" => self.label(placeholder, &raw[1..])?,
                    other => other.to_string(),
                };
                let object = self
                    .env
                    .find(&name)
                    .ok_or_else(|| Self::err(placeholder, format!("no object labeled '{name}'")))?;
                Ok(json!(object.position))
            }
            "cap" => Ok(json!(self.group(placeholder, arg)?)),
            "num" => Ok(json!(self.number(placeholder, arg)?)),
            "negnum" => Ok(json!(-self.number(placeholder, arg)?)),
            "cm" => Ok(json!(self.number(placeholder, arg)? / 100.0)),
            "negcm" => Ok(json!(-self.number(placeholder, arg)? / 100.0)),
            _ => Err(Self::err(placeholder, "unknown placeholder")),
        }
    }
}

/// Chat-completions client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

/// Environment variable holding the API key for [`HttpBackend`].
pub const API_KEY_VAR: &str = "KMPADAPT_API_KEY";

impl HttpBackend {
    pub fn new(base_url: &str, model: &str, timeout: Duration, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
        })
    }

    /// Request body for `request`.
    pub fn body(&self, request: &CompletionRequest) -> Value {
        json!({
            "model": self.model,
            "messages": request.messages().iter().map(ChatTurn::to_wire).collect::<Vec<_>>(),
            "tools": request.schemas,
            "tool_choice": "auto",
            "temperature": 0,
        })
    }
}

/// Assistant turn from a chat-completions response body.
pub fn parse_response(body: &str) -> Result<ChatTurn, LlmError> {
    let protocol = |message: &str| LlmError::Protocol { message: message.into(), body: body.into() };
    let v: Value = serde_json::from_str(body).map_err(|e| protocol(&format!("response is not JSON: {e}")))?;
    let message = v
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .ok_or_else(|| protocol("response has no choices[0].message"))?;
    let content = message.get("content").and_then(|c| c.as_str()).map(|s| s.to_string());
    let mut calls = Vec::new();
    if let Some(raw_calls) = message.get("tool_calls").filter(|t| !t.is_null()) {
        let list = raw_calls.as_array().ok_or_else(|| protocol("tool_calls is not an array"))?;
        for (i, c) in list.iter().enumerate() {
            let function = c.get("function").ok_or_else(|| protocol("tool call without function"))?;
            let name = function
                .get("name")
                .and_then(|n| n.as_str())
                .ok_or_else(|| protocol("tool call without function name"))?;
            let id = c.get("id").and_then(|i| i.as_str()).map(|s| s.to_string()).unwrap_or_else(|| format!("call_{i}"));
            let arguments = match function.get("arguments") {
                Some(Value::String(s)) => serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.clone())),
                Some(other) => other.clone(),
                None => Value::Object(Map::new()),
            };
            calls.push(ToolCall::new(id, name, arguments));
        }
    }
    if content.is_none() && calls.is_empty() {
        return Err(protocol("assistant message has neither content nor tool calls"));
    }
    Ok(ChatTurn::assistant(content, calls))
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<ChatTurn, LlmError> {
        let mut req = self.client.post(&self.endpoint).json(&self.body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = req.send().map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| LlmError::BackendUnavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::BackendUnavailable(format!("HTTP {status}: {text}")));
        }
        parse_response(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::EnvironmentObject;

    fn env() -> EnvironmentModel {
        let obj = |label: &str, p: [f64; 3]| EnvironmentObject { label: label.into(), position: p, dimensions: [0.1; 3] };
        EnvironmentModel::new(
            vec![
                obj("box", [0.5, 0.25, 0.1]),
                obj("station", [0.55, -0.25, 0.15]),
                obj("blue box", [0.5, 0.0, 0.2]),
            ],
            None,
        )
        .unwrap()
    }

    fn mock(rules: &str) -> MockBackend {
        MockBackend::from_json(rules).unwrap()
    }

    #[test]
    fn longer_labels_shadow_shorter_ones() {
        assert_eq!(mentioned_labels("Please avoid the blue box", &env()), vec!["blue box"]);
        assert_eq!(mentioned_labels("between the Station and the box", &env()), vec!["station", "box"]);
        assert!(mentioned_labels("boxes everywhere", &env()).is_empty());
    }

    #[test]
    fn avoid_rule_emits_repulsion() {
        let m = mock(
            r#"{"rules":[{"match":"avoid","requires_labels":1,
                "emit":[{"tool":"GenerateRepulsionPoints","arguments":{"obstacle":"$label"}}]}]}"#,
        );
        let calls = m.respond("Please avoid the blue box", &env()).unwrap();
        assert_eq!(calls, vec![ToolCall::new("call_0", "GenerateRepulsionPoints", json!({"obstacle": "blue box"}))]);
    }

    #[test]
    fn first_matching_rule_wins() {
        let m = mock(
            r#"{"rules":[
                {"match":"slow","emit":[{"tool":"A","arguments":{}}]},
                {"match":"slow down","emit":[{"tool":"B","arguments":{}}]}]}"#,
        );
        assert_eq!(m.respond("slow down", &env()).unwrap()[0].name, "A");
    }

    #[test]
    fn numbers_and_positions_resolve() {
        let m = mock(
            r#"{"rules":[{"match":"by (\\d+)\\s*%.*?(\\d+)\\s*cm","requires_labels":1,
                "emit":[{"tool":"T","arguments":{"v":"$num(1)","w":"$negnum(1)","d":[0,"$cm(2)",0],
                "p":"$pos($label)","q":"$pos(station)","t":"go to $label"}}]}]}"#,
        );
        let calls = m.respond("slow by 40% then lift 10 cm at the box", &env()).unwrap();
        assert_eq!(
            calls[0].arguments,
            json!({"v": 40.0, "w": -40.0, "d": [0, 0.1, 0], "p": [0.5, 0.25, 0.1], "q": [0.55, -0.25, 0.15], "t": "go to box"})
        );
    }

    #[test]
    fn unresolvable_placeholder_is_an_error() {
        let m = mock(r#"{"rules":[{"match":"go","emit":[{"tool":"T","arguments":{"p":"$pos(green cube)"}}]}]}"#);
        let err = m.respond("go", &env()).unwrap_err();
        assert!(matches!(err, LlmError::RuleResolution { ref placeholder, .. } if placeholder == "$pos(green cube)"));
        let m = mock(r#"{"rules":[{"match":"go","emit":[{"tool":"T","arguments":{"p":"$label2"}}]}]}"#);
        assert!(m.respond("go to the box", &env()).is_err());
    }

    #[test]
    fn fallback_responds_to_user() {
        let m = mock(r#"{"rules":[]}"#);
        let calls = m.respond("hello", &env()).unwrap();
        assert_eq!(calls[0].name, RESPOND_TOOL);
    }

    #[test]
    fn label_requirement_skips_rule() {
        let m = mock(
            r#"{"rules":[{"match":"avoid","requires_labels":1,"emit":[{"tool":"A","arguments":{}}]},
                         {"match":"avoid","emit":[{"tool":"B","arguments":{}}]}]}"#,
        );
        assert_eq!(m.respond("avoid the lamp", &env()).unwrap()[0].name, "B");
    }

    #[test]
    fn parses_tool_calls_from_response() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":null,"tool_calls":[
            {"id":"abc","type":"function","function":{"name":"SpeedUpRobot","arguments":"{\"speed_up_value\":50}"}},
            {"id":"def","type":"function","function":{"name":"RespondToUser","arguments":"{not json"}}]}}]}"#;
        let turn = parse_response(body).unwrap();
        assert_eq!(turn.tool_calls[0].arguments, json!({"speed_up_value": 50}));
        assert_eq!(turn.tool_calls[1].arguments, json!("{not json"));
        assert!(matches!(parse_response("{}"), Err(LlmError::Protocol { .. })));
    }

    #[test]
    fn wire_turns_encode_arguments_as_strings() {
        let turn = ChatTurn::assistant(None, vec![ToolCall::new("1", "T", json!({"a": 1}))]);
        let wire = turn.to_wire();
        assert_eq!(wire["tool_calls"][0]["function"]["arguments"], json!("{\"a\":1}"));
        assert_eq!(ChatTurn::tool("1", "ok").to_wire()["tool_call_id"], json!("1"));
    }
}
