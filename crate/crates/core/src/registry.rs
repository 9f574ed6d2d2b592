//! Tool descriptors, function-calling schema serialization, layered argument
//! validation and dispatch onto the adaptation tools.
//!
//! The schema sent to the model and the validator are both driven by the
//! same [`ToolDescriptor`] declarations.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::kmp::ReferenceDistribution;
use crate::tools::{
    tool_repulsion, tool_speed, tool_via_point, ObstacleSpec, PhaseOrLabel, Sdf, SpeedArgs, ToolConfig, ToolError,
    ToolOutcome, ViaArgs, ViaTarget,
};
use crate::trajectory::{EnvironmentModel, Trajectory};

pub const SPEED_TOOL: &str = "SpeedUpRobot";
pub const VIA_TOOL: &str = "InsertViaPoint";
pub const REPULSION_TOOL: &str = "GenerateRepulsionPoints";
pub const RESPOND_TOOL: &str = "RespondToUser";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("registry has no tools")]
    Empty,
    #[error("duplicate tool name '{0}'")]
    DuplicateTool(String),
    #[error("unknown tool '{0}'")]
    UnknownTool(String),
    #[error("invalid descriptor for '{tool}': {message}")]
    InvalidDescriptor { tool: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Integer,
    Number,
    String,
    /// Array of exactly three numbers.
    Vector3,
    Enum(Vec<String>),
    /// A phase in `[0, 1]` or an object label.
    PhaseOrLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub description: String,
    pub required: bool,
    /// Inclusive bounds; componentwise for vectors, numeric branch only for
    /// phase-or-label.
    pub range: Option<(f64, f64)>,
    pub unit: Option<String>,
    /// Checked against the workspace box.
    pub positional: bool,
}

impl ParamSpec {
    fn new(name: &str, kind: ParamKind, description: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            description: description.into(),
            required: false,
            range: None,
            unit: None,
            positional: false,
        }
    }

    fn required(mut self) -> Self {
        self.required = true;
        self
    }

    fn range(mut self, min: f64, max: f64) -> Self {
        self.range = Some((min, max));
        self
    }

    fn unit(mut self, unit: &str) -> Self {
        self.unit = Some(unit.into());
        self
    }

    fn positional(mut self) -> Self {
        self.positional = true;
        self
    }

    fn schema(&self) -> Value {
        let mut out = Map::new();
        match &self.kind {
            ParamKind::Integer => {
                out.insert("type".into(), json!("integer"));
            }
            ParamKind::Number => {
                out.insert("type".into(), json!("number"));
            }
            ParamKind::String => {
                out.insert("type".into(), json!("string"));
            }
            ParamKind::Vector3 => {
                out.insert("type".into(), json!("array"));
                let mut items = Map::new();
                items.insert("type".into(), json!("number"));
                if let Some((min, max)) = self.range {
                    items.insert("minimum".into(), json!(min));
                    items.insert("maximum".into(), json!(max));
                }
                out.insert("items".into(), Value::Object(items));
                out.insert("minItems".into(), json!(3));
                out.insert("maxItems".into(), json!(3));
            }
            ParamKind::Enum(values) => {
                out.insert("type".into(), json!("string"));
                out.insert("enum".into(), json!(values));
            }
            ParamKind::PhaseOrLabel => {
                out.insert("type".into(), json!(["number", "string"]));
            }
        }
        let description = match &self.unit {
            Some(unit) => format!("{} (unit: {unit})", self.description),
            None => self.description.clone(),
        };
        out.insert("description".into(), json!(description));
        if !matches!(self.kind, ParamKind::Vector3) {
            if let Some((min, max)) = self.range {
                out.insert("minimum".into(), json!(min));
                out.insert("maximum".into(), json!(max));
            }
        }
        Value::Object(out)
    }
}

/// Cross-parameter presence rules.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    ExactlyOne(Vec<String>),
    AtMostOne(Vec<String>),
    AtLeastOne(Vec<String>),
    /// If the first parameter is present, so must be one of the others.
    Requires(String, Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    Speed,
    ViaPoint,
    Repulsion,
    Respond,
}

impl ToolKind {
    pub fn is_mutating(self) -> bool {
        !matches!(self, ToolKind::Respond)
    }

    fn error_prefix(self) -> &'static str {
        match self {
            ToolKind::Speed => "Error speeding up robot",
            ToolKind::ViaPoint => "Error inserting via-point",
            ToolKind::Repulsion => "Error generating repulsion points",
            ToolKind::Respond => "Error responding to user",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub kind: ToolKind,
    pub parameters: Vec<ParamSpec>,
    pub constraints: Vec<Constraint>,
}

impl ToolDescriptor {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    fn check(&self) -> Result<(), RegistryError> {
        let bad = |message: String| RegistryError::InvalidDescriptor { tool: self.name.clone(), message };
        let mut seen = std::collections::HashSet::new();
        for p in &self.parameters {
            if !seen.insert(&p.name) {
                return Err(bad(format!("duplicate parameter '{}'", p.name)));
            }
            if p.description.trim().is_empty() {
                return Err(bad(format!("parameter '{}' has no description", p.name)));
            }
            if let Some((min, max)) = p.range {
                if !(min <= max) {
                    return Err(bad(format!("parameter '{}' has an inverted range", p.name)));
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Value {
        let mut properties = Map::new();
        for p in &self.parameters {
            properties.insert(p.name.clone(), p.schema());
        }
        let required: Vec<&str> = self.parameters.iter().filter(|p| p.required).map(|p| p.name.as_str()).collect();
        json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": required,
                }
            }
        })
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn speed_descriptor(cfg: &ToolConfig) -> ToolDescriptor {
    ToolDescriptor {
        name: SPEED_TOOL.into(),
        description: "Change how fast the robot executes part of its trajectory. Positive values slow the \
                      segment down, negative values speed it up. Use 0 and 1 as start and end for the whole \
                      trajectory; use object labels to anchor the segment at the moments the robot is at \
                      those objects."
            .into(),
        kind: ToolKind::Speed,
        parameters: vec![
            ParamSpec::new(
                "speed_up_value",
                ParamKind::Integer,
                "Percentage change of the time intervals; 50 makes the segment 1.5 times slower",
            )
            .required()
            .range(-cfg.speed_limit, cfg.speed_limit)
            .unit("percent"),
            ParamSpec::new(
                "adaption_start",
                ParamKind::PhaseOrLabel,
                "Start of the segment: a normalized phase between 0 and 1 or the label of an object on the path",
            )
            .required()
            .range(0.0, 1.0),
            ParamSpec::new(
                "adaption_end",
                ParamKind::PhaseOrLabel,
                "End of the segment: a normalized phase between 0 and 1 or the label of an object on the path",
            )
            .required()
            .range(0.0, 1.0),
        ],
        constraints: vec![],
    }
}

pub fn via_descriptor(cfg: &ToolConfig) -> ToolDescriptor {
    let ws = cfg.workspace;
    let bound = ws.min.iter().chain(ws.max.iter()).fold(0.0_f64, |a, b| a.max(b.abs()));
    ToolDescriptor {
        name: VIA_TOOL.into(),
        description: "Make the trajectory pass through a point. Give an object label or explicit coordinates, \
                      optionally shifted by an offset in the robot base frame (+x forward, +y left, +z up). \
                      Without a target, the offset moves the current trajectory point at s_hint."
            .into(),
        kind: ToolKind::ViaPoint,
        parameters: vec![
            ParamSpec::new("target_label", ParamKind::String, "Label of the object the robot should pass through"),
            ParamSpec::new("target_position", ParamKind::Vector3, "Explicit point [x, y, z] to pass through")
                .unit("m")
                .positional(),
            ParamSpec::new("offset", ParamKind::Vector3, "Shift [dx, dy, dz] added to the target")
                .range(-2.0 * bound, 2.0 * bound)
                .unit("m"),
            ParamSpec::new("s_hint", ParamKind::Number, "Normalized phase at which to pass the point").range(0.0, 1.0),
            ParamSpec::new(
                "after",
                ParamKind::PhaseOrLabel,
                "Only consider the part of the trajectory after this phase or object",
            )
            .range(0.0, 1.0),
            ParamSpec::new(
                "before",
                ParamKind::PhaseOrLabel,
                "Only consider the part of the trajectory before this phase or object",
            )
            .range(0.0, 1.0),
            ParamSpec::new("covariance_scale", ParamKind::Number, "Variance of the via-point; smaller is stricter")
                .range(1e-12, 1.0)
                .unit("m^2"),
        ],
        constraints: vec![
            Constraint::AtMostOne(names(&["target_label", "target_position"])),
            Constraint::AtLeastOne(names(&["target_label", "target_position", "offset"])),
        ],
    }
}

pub fn repulsion_descriptor(_cfg: &ToolConfig) -> ToolDescriptor {
    ToolDescriptor {
        name: REPULSION_TOOL.into(),
        description: "Push the trajectory away from an obstacle so that it keeps a safety margin. Name the \
                      obstacle by its label, or describe a sphere or box by center and size."
            .into(),
        kind: ToolKind::Repulsion,
        parameters: vec![
            ParamSpec::new("obstacle", ParamKind::String, "Label of the obstacle to avoid"),
            ParamSpec::new("obstacle_center", ParamKind::Vector3, "Center [x, y, z] of an unlabeled obstacle")
                .unit("m"),
            ParamSpec::new("obstacle_radius", ParamKind::Number, "Radius of a spherical obstacle")
                .range(1e-4, 2.0)
                .unit("m"),
            ParamSpec::new("obstacle_half_extents", ParamKind::Vector3, "Half sizes of a box obstacle")
                .range(1e-4, 2.0)
                .unit("m"),
        ],
        constraints: vec![
            Constraint::ExactlyOne(names(&["obstacle", "obstacle_center"])),
            Constraint::Requires("obstacle_center".into(), names(&["obstacle_radius", "obstacle_half_extents"])),
            Constraint::AtMostOne(names(&["obstacle_radius", "obstacle_half_extents"])),
            Constraint::Requires("obstacle_radius".into(), names(&["obstacle_center"])),
            Constraint::Requires("obstacle_half_extents".into(), names(&["obstacle_center"])),
        ],
    }
}

pub fn respond_descriptor() -> ToolDescriptor {
    ToolDescriptor {
        name: RESPOND_TOOL.into(),
        description: "Reply to the user without changing the trajectory: answer questions, ask for \
                      clarification, or explain why a request cannot be carried out."
            .into(),
        kind: ToolKind::Respond,
        parameters: vec![ParamSpec::new("text", ParamKind::String, "Message shown to the user").required()],
        constraints: vec![],
    }
}

/// Which tools a registry exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub tools: Vec<String>,
}

impl Default for TaskProfile {
    fn default() -> Self {
        Self { tools: names(&[SPEED_TOOL, VIA_TOOL, REPULSION_TOOL, RESPOND_TOOL]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolRegistry {
    tools: Vec<ToolDescriptor>,
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolDescriptor>) -> Result<Self, RegistryError> {
        let mut seen = std::collections::HashSet::new();
        for t in &tools {
            if !seen.insert(t.name.clone()) {
                return Err(RegistryError::DuplicateTool(t.name.clone()));
            }
            t.check()?;
        }
        Ok(Self { tools })
    }

    /// Registry exposing the tools named by `profile`, in profile order.
    pub fn for_profile(profile: &TaskProfile, cfg: &ToolConfig) -> Result<Self, RegistryError> {
        let tools = profile
            .tools
            .iter()
            .map(|name| match name.as_str() {
                SPEED_TOOL => Ok(speed_descriptor(cfg)),
                VIA_TOOL => Ok(via_descriptor(cfg)),
                REPULSION_TOOL => Ok(repulsion_descriptor(cfg)),
                RESPOND_TOOL => Ok(respond_descriptor()),
                other => Err(RegistryError::UnknownTool(other.into())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(tools)
    }

    pub fn standard(cfg: &ToolConfig) -> Self {
        Self::for_profile(&TaskProfile::default(), cfg).expect("standard tools are well-formed")
    }

    pub fn tools(&self) -> &[ToolDescriptor] {
        &self.tools
    }

    pub fn get(&self, name: &str) -> Option<&ToolDescriptor> {
        self.tools.iter().find(|t| t.name == name)
    }

    /// Function-calling schema array, tools in registration order.
    pub fn serialize_schemas(&self) -> Result<Value, RegistryError> {
        if self.tools.is_empty() {
            return Err(RegistryError::Empty);
        }
        Ok(Value::Array(self.tools.iter().map(|t| t.schema()).collect()))
    }
}

/// One tool invocation as returned by the model; arguments are raw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    pub arguments: Value,
}

impl ToolCall {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: Value) -> Self {
        Self { id: id.into(), name: name.into(), arguments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Existence,
    Type,
    Required,
    Range,
    Workspace,
    Segment,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Existence => "existence",
            Layer::Type => "type",
            Layer::Required => "required",
            Layer::Range => "range",
            Layer::Workspace => "workspace",
            Layer::Segment => "segment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub parameter: String,
    pub layer: Layer,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    fn from_failures(failures: Vec<ValidationFailure>) -> Self {
        let verdict = if failures.is_empty() { Verdict::Ok } else { Verdict::Rejected };
        Self { verdict, failures }
    }

    pub fn is_ok(&self) -> bool {
        self.verdict == Verdict::Ok
    }

    /// Feedback listing every failure by parameter, layer and message.
    pub fn feedback(&self, tool: &str) -> String {
        let lines: Vec<String> = self
            .failures
            .iter()
            .map(|f| format!("{} ({} check): {}", f.parameter, f.layer.as_str(), f.message))
            .collect();
        format!("Rejected {tool} call. {}", lines.join("; "))
    }
}

fn failure(parameter: &str, layer: Layer, message: impl Into<String>) -> ValidationFailure {
    ValidationFailure { parameter: parameter.into(), layer, message: message.into() }
}

fn as_number(v: &Value) -> Option<f64> {
    v.as_f64().filter(|x| x.is_finite())
}

fn as_vector3(v: &Value) -> Option<[f64; 3]> {
    let items = v.as_array()?;
    if items.len() != 3 {
        return None;
    }
    let mut out = [0.0; 3];
    for (o, item) in out.iter_mut().zip(items) {
        *o = as_number(item)?;
    }
    Some(out)
}

fn type_name(kind: &ParamKind) -> &'static str {
    match kind {
        ParamKind::Integer => "an integer",
        ParamKind::Number => "a number",
        ParamKind::String => "a string",
        ParamKind::Vector3 => "an array of three numbers",
        ParamKind::Enum(_) => "one of the allowed strings",
        ParamKind::PhaseOrLabel => "a phase number or an object label",
    }
}

fn type_ok(kind: &ParamKind, v: &Value) -> bool {
    match kind {
        ParamKind::Integer => as_number(v).is_some_and(|x| x.fract() == 0.0),
        ParamKind::Number => as_number(v).is_some(),
        ParamKind::String => v.is_string(),
        ParamKind::Vector3 => as_vector3(v).is_some(),
        ParamKind::Enum(values) => v.as_str().is_some_and(|s| values.iter().any(|x| x == s)),
        ParamKind::PhaseOrLabel => as_number(v).is_some() || v.as_str().is_some_and(|s| !s.trim().is_empty()),
    }
}

fn format_bounds(spec: &ParamSpec, min: f64, max: f64) -> String {
    match &spec.unit {
        Some(unit) => format!("[{min}, {max}] {unit}"),
        None => format!("[{min}, {max}]"),
    }
}

fn check_param(spec: &ParamSpec, value: &Value, cfg: &ToolConfig) -> Option<ValidationFailure> {
    if !type_ok(&spec.kind, value) {
        return Some(failure(&spec.name, Layer::Type, format!("expected {}, got {value}", type_name(&spec.kind))));
    }
    if let Some((min, max)) = spec.range {
        let values: Vec<f64> = match spec.kind {
            ParamKind::Vector3 => as_vector3(value).map(|v| v.to_vec()).unwrap_or_default(),
            _ => as_number(value).into_iter().collect(),
        };
        if let Some(bad) = values.iter().find(|x| **x < min || **x > max) {
            return Some(failure(
                &spec.name,
                Layer::Range,
                format!("{bad} is outside {}", format_bounds(spec, min, max)),
            ));
        }
    }
    if spec.positional {
        if let Some(p) = as_vector3(value) {
            if !cfg.workspace.contains(&Vector3::from(p)) {
                let ws = cfg.workspace;
                return Some(failure(
                    &spec.name,
                    Layer::Workspace,
                    format!("point {p:?} m lies outside the workspace {:?}..{:?} m", ws.min, ws.max),
                ));
            }
        }
    }
    None
}

/// Arguments with `null` values dropped; `None` when not a JSON object.
fn present_args(call: &ToolCall) -> Option<Map<String, Value>> {
    match &call.arguments {
        Value::Object(map) => Some(map.iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k.clone(), v.clone())).collect()),
        Value::Null => Some(Map::new()),
        _ => None,
    }
}

/// Run every validation layer on `call`. Total: never panics, failures are
/// data.
pub fn validate(call: &ToolCall, registry: &ToolRegistry, cfg: &ToolConfig) -> ValidationReport {
    let Some(tool) = registry.get(&call.name) else {
        return ValidationReport::from_failures(vec![failure(
            "tool",
            Layer::Existence,
            format!("unknown tool '{}'", call.name),
        )]);
    };
    let Some(args) = present_args(call) else {
        return ValidationReport::from_failures(vec![failure(
            "arguments",
            Layer::Type,
            "arguments must be a JSON object",
        )]);
    };
    let mut failures = Vec::new();
    for name in args.keys() {
        if tool.param(name).is_none() {
            failures.push(failure(name, Layer::Existence, format!("{} has no parameter '{name}'", tool.name)));
        }
    }
    for spec in &tool.parameters {
        match args.get(&spec.name) {
            Some(v) => failures.extend(check_param(spec, v, cfg)),
            None if spec.required => {
                failures.push(failure(&spec.name, Layer::Required, "required parameter is missing"))
            }
            None => {}
        }
    }
    let has = |n: &String| args.contains_key(n);
    for c in &tool.constraints {
        let problem = match c {
            Constraint::ExactlyOne(group) if group.iter().filter(|n| has(n)).count() != 1 => {
                Some((group[0].clone(), format!("give exactly one of {}", group.join(", "))))
            }
            Constraint::AtMostOne(group) if group.iter().filter(|n| has(n)).count() > 1 => {
                Some((group[0].clone(), format!("give at most one of {}", group.join(", "))))
            }
            Constraint::AtLeastOne(group) if !group.iter().any(has) => {
                Some((group[0].clone(), format!("give at least one of {}", group.join(", "))))
            }
            Constraint::Requires(first, others) if has(first) && !others.iter().any(has) => {
                Some((first.clone(), format!("{first} also needs one of {}", others.join(", "))))
            }
            _ => None,
        };
        if let Some((parameter, message)) = problem {
            if !failures.iter().any(|f| f.parameter == parameter) {
                failures.push(failure(&parameter, Layer::Required, message));
            }
        }
    }
    if failures.is_empty() {
        let pairs: &[(&str, &str, &str)] = match tool.kind {
            ToolKind::Speed => &[("adaption_start", "adaption_end", "adaption_start must be less than adaption_end")],
            ToolKind::ViaPoint => &[("after", "before", "after must be less than before")],
            _ => &[],
        };
        for (lo, hi, message) in pairs {
            if let (Some(a), Some(b)) =
                (args.get(*lo).and_then(as_number), args.get(*hi).and_then(as_number))
            {
                if a >= b {
                    failures.push(failure(lo, Layer::Segment, *message));
                }
            }
        }
    }
    ValidationReport::from_failures(failures)
}

/// Typed form of a validated call.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Speed(SpeedArgs),
    Via(ViaArgs),
    Repulsion(ObstacleSpec),
    Respond(String),
}

fn phase_or_label(v: &Value) -> PhaseOrLabel {
    match as_number(v) {
        Some(x) => PhaseOrLabel::Phase(x),
        None => PhaseOrLabel::Label(v.as_str().unwrap_or_default().trim().to_string()),
    }
}

/// Convert a call that passed [`validate`] into typed arguments.
pub fn to_action(call: &ToolCall, registry: &ToolRegistry) -> Option<Action> {
    let tool = registry.get(&call.name)?;
    let args = present_args(call)?;
    let num = |n: &str| args.get(n).and_then(as_number);
    let vec3 = |n: &str| args.get(n).and_then(as_vector3).map(Vector3::from);
    let text = |n: &str| args.get(n).and_then(|v| v.as_str()).map(|s| s.to_string());
    Some(match tool.kind {
        ToolKind::Speed => Action::Speed(SpeedArgs {
            gamma: num("speed_up_value")?,
            start: args.get("adaption_start").map(phase_or_label),
            end: args.get("adaption_end").map(phase_or_label),
        }),
        ToolKind::ViaPoint => Action::Via(ViaArgs {
            target: match (text("target_label"), vec3("target_position")) {
                (Some(label), _) => Some(ViaTarget::Label(label)),
                (None, Some(p)) => Some(ViaTarget::Position(p)),
                (None, None) => None,
            },
            offset: vec3("offset"),
            s_hint: num("s_hint"),
            after: args.get("after").map(phase_or_label),
            before: args.get("before").map(phase_or_label),
            covariance_scale: num("covariance_scale"),
        }),
        ToolKind::Repulsion => Action::Repulsion(match (text("obstacle"), vec3("obstacle_center")) {
            (Some(label), _) => ObstacleSpec::Label(label),
            (None, Some(center)) => ObstacleSpec::Shape(match (num("obstacle_radius"), vec3("obstacle_half_extents")) {
                (Some(radius), _) => Sdf::Sphere { center: center.into(), radius },
                (None, Some(h)) => Sdf::Cuboid { center: center.into(), half_extents: h.into() },
                (None, None) => return None,
            }),
            (None, None) => return None,
        }),
        ToolKind::Respond => Action::Respond(text("text").unwrap_or_default()),
    })
}

/// Relay a message to the user. Never mutates.
pub fn respond_to_user(text: &str) -> String {
    text.to_string()
}

#[derive(Debug, Clone)]
pub enum DispatchOutcome {
    Applied { kind: ToolKind, outcome: ToolOutcome },
    Responded { text: String },
    Rejected { report: ValidationReport, feedback: String },
    Failed { message: String },
}

impl DispatchOutcome {
    pub fn feedback(&self) -> &str {
        match self {
            DispatchOutcome::Applied { outcome, .. } => &outcome.summary,
            DispatchOutcome::Responded { text } => text,
            DispatchOutcome::Rejected { feedback, .. } => feedback,
            DispatchOutcome::Failed { message } => message,
        }
    }

    pub fn is_mutation(&self) -> bool {
        matches!(self, DispatchOutcome::Applied { .. })
    }

    pub fn reference(&self) -> Option<&ReferenceDistribution> {
        match self {
            DispatchOutcome::Applied { outcome, .. } => Some(&outcome.reference),
            _ => None,
        }
    }
}

/// Argument problems a tool only detects once labels are resolved are
/// reported like validation failures; everything else is an execution error.
fn late_rejection(error: &ToolError) -> Option<ValidationFailure> {
    match error {
        ToolError::OutOfRange { parameter, .. } => Some(failure(parameter, Layer::Range, error.to_string())),
        ToolError::OutsideWorkspace { parameter, .. } => {
            Some(failure(parameter, Layer::Workspace, error.to_string()))
        }
        ToolError::InvalidSegment { .. } => Some(failure("segment", Layer::Segment, error.to_string())),
        _ => None,
    }
}

/// Validate and, when the call passes, execute it against `reference`.
/// Rejections and failures never produce a new distribution.
pub fn dispatch(
    call: &ToolCall,
    reference: &ReferenceDistribution,
    traj: &Trajectory,
    env: &EnvironmentModel,
    cfg: &ToolConfig,
    registry: &ToolRegistry,
) -> DispatchOutcome {
    let report = validate(call, registry, cfg);
    if !report.is_ok() {
        let feedback = report.feedback(&call.name);
        return DispatchOutcome::Rejected { report, feedback };
    }
    let Some(action) = to_action(call, registry) else {
        return DispatchOutcome::Failed { message: format!("could not interpret arguments of {}", call.name) };
    };
    let kind = registry.get(&call.name).map(|t| t.kind).unwrap_or(ToolKind::Respond);
    let result = match &action {
        Action::Speed(args) => tool_speed(reference, traj, env, args, cfg),
        Action::Via(args) => tool_via_point(reference, traj, env, args, cfg),
        Action::Repulsion(obstacle) => tool_repulsion(reference, traj, env, obstacle, cfg),
        Action::Respond(text) => return DispatchOutcome::Responded { text: respond_to_user(text) },
    };
    match result {
        Ok(outcome) => DispatchOutcome::Applied { kind, outcome },
        Err(e) => match late_rejection(&e) {
            Some(f) => {
                let report = ValidationReport::from_failures(vec![f]);
                let feedback = report.feedback(&call.name);
                DispatchOutcome::Rejected { report, feedback }
            }
            None => DispatchOutcome::Failed { message: format!("{}: {e}", kind.error_prefix()) },
        },
    }
}
