//! Chain of Behavior Simulation: resolves one leaf at a time against the
//! world state through focused model calls.
//!
//! An Action goes through consider (which conditions must hold, and on which
//! state slots), decide (one call per condition), and, when every condition
//! is met, capture (which slots change) and transfer (their new values).
//! A Condition stops after decide and never touches the state. The
//! `single_phase` mode asks for all of it in one call.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::bt_engine::{tick, BehaviorTree, BtNode, FlowEntry, LeafKind, TickStatus};
use crate::case_gen::SimulationCase;
use crate::code_reasoning::{self, OutputType, Program};
use crate::feedback::{
    check_semantics, parse_checked, with_feedback, Attempt, FeedbackError, Schema, Violation, ViolationKind,
};
use crate::llm_backend::{Backend, BackendError, ChatRequest, Message, Usage};
use crate::tracing::{Event, EventSink};
use crate::world_state::{diff, EntityField, Snapshot, StateChange, StatePath, Value, WorldState, DIMENSIONLESS};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Cbs,
    SinglePhase,
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimMode::Cbs => "cbs",
            SimMode::SinglePhase => "single_phase",
        })
    }
}

/// Prompt templates. Placeholders are written `{name}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub system: String,
    pub consider: String,
    pub decide: String,
    pub decide_semantic: String,
    pub decide_code: String,
    pub capture: String,
    pub transfer: String,
    pub single_phase: String,
    pub evaluate: String,
    pub case_generation: String,
    pub feedback: String,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            system: include_str!("../templates/system.txt").into(),
            consider: include_str!("../templates/consider.txt").into(),
            decide: include_str!("../templates/decide.txt").into(),
            decide_semantic: include_str!("../templates/decide_semantic.txt").into(),
            decide_code: include_str!("../templates/decide_code.txt").into(),
            capture: include_str!("../templates/capture.txt").into(),
            transfer: include_str!("../templates/transfer.txt").into(),
            single_phase: include_str!("../templates/single_phase.txt").into(),
            evaluate: include_str!("../templates/evaluate.txt").into(),
            case_generation: include_str!("../templates/case_generation.txt").into(),
            feedback: crate::feedback::FEEDBACK_TEMPLATE.into(),
        }
    }
}

impl Templates {
    /// Built-in templates, with any `<name>.txt` found in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = Templates::default();
        let slots: [(&str, &mut String); 11] = [
            ("system", &mut t.system),
            ("consider", &mut t.consider),
            ("decide", &mut t.decide),
            ("decide_semantic", &mut t.decide_semantic),
            ("decide_code", &mut t.decide_code),
            ("capture", &mut t.capture),
            ("transfer", &mut t.transfer),
            ("single_phase", &mut t.single_phase),
            ("evaluate", &mut t.evaluate),
            ("case_generation", &mut t.case_generation),
            ("feedback", &mut t.feedback),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Replaces each `{key}` in `template`.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// The JSON schemas every phase payload is checked against.
pub struct Schemas {
    pub consider: Schema,
    pub decide_semantic: Schema,
    pub decide_code: Schema,
    pub capture: Schema,
    pub transfer: Schema,
    pub single_phase: Schema,
    pub evaluate: Schema,
    pub case: Schema,
}

pub const SCHEMA_FILES: [(&str, &str); 8] = [
    ("consider", include_str!("../schemas/consider.schema.json")),
    ("decide_semantic", include_str!("../schemas/decide_semantic.schema.json")),
    ("decide_code", include_str!("../schemas/decide_code.schema.json")),
    ("capture", include_str!("../schemas/capture.schema.json")),
    ("transfer", include_str!("../schemas/transfer.schema.json")),
    ("single_phase", include_str!("../schemas/single_phase.schema.json")),
    ("evaluate", include_str!("../schemas/evaluate.schema.json")),
    ("case", include_str!("../schemas/case.schema.json")),
];

pub fn schemas() -> &'static Schemas {
    static CELL: OnceLock<Schemas> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = |i: usize| Schema::parse(SCHEMA_FILES[i].1).expect("built-in schema parses");
        Schemas {
            consider: s(0),
            decide_semantic: s(1),
            decide_code: s(2),
            capture: s(3),
            transfer: s(4),
            single_phase: s(5),
            evaluate: s(6),
            case: s(7),
        }
    })
}

fn schema_text(schema: &Schema) -> String {
    serde_json::to_string_pretty(schema.document()).expect("schema serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: SimMode,
    /// Route numeric conditions through sandbox programs.
    pub code_reasoning: bool,
    /// Re-asks allowed per model exchange; 0 disables feedback.
    pub max_feedback: usize,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip)]
    pub templates: Arc<Templates>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            mode: SimMode::Cbs,
            code_reasoning: true,
            max_feedback: crate::feedback::DEFAULT_MAX_ROUNDS,
            model: "default".into(),
            temperature: 0.0,
            max_tokens: 2048,
            seed: Some(0),
            templates: Arc::new(Templates::default()),
        }
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Consider,
    Decide,
    Capture,
    Transfer,
    SinglePhase,
    Evaluate,
    CaseGeneration,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Consider => "consider",
            Phase::Decide => "decide",
            Phase::Capture => "capture",
            Phase::Transfer => "transfer",
            Phase::SinglePhase => "single_phase",
            Phase::Evaluate => "evaluate",
            Phase::CaseGeneration => "case_generation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecideMode {
    Semantic,
    Code,
}

impl fmt::Display for DecideMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecideMode::Semantic => "semantic",
            DecideMode::Code => "code",
        })
    }
}

/// One model exchange, including its repair rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    /// Index of the judged condition, for decide records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<usize>,
    pub prompt: String,
    pub attempts: Vec<Attempt>,
    /// The accepted payload; absent when the exchange was not delivered.
    pub payload: Option<Json>,
    pub rounds: usize,
    pub usage: Usage,
    pub latency_ms: u64,
}

impl PhaseRecord {
    pub fn delivered(&self) -> bool {
        self.payload.is_some()
    }

    pub fn responses(&self) -> impl Iterator<Item = &str> {
        self.attempts.iter().map(|a| a.response.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub statement: String,
    pub crucial_states: Vec<StatePath>,
}

/// A program as run in the sandbox, with the state paths its names were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramTrace {
    pub source: String,
    pub bindings: BTreeMap<String, StatePath>,
    pub values: BTreeMap<String, Value>,
    pub result: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub spec: ConditionSpec,
    pub met: bool,
    pub mode: DecideMode,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<ProgramTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub path: StatePath,
    pub value: Value,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<ProgramTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub captured_paths: Vec<StatePath>,
    pub transfers: Vec<Transfer>,
}

impl TransferPlan {
    /// Applies every transfer or none.
    pub fn apply(&self, state: &mut WorldState) -> Result<(), crate::world_state::StateError> {
        state.apply_all(self.transfers.iter().map(|t| (&t.path, &t.value, true)))
    }
}

/// Everything that happened while resolving one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTranscript {
    pub node_id: String,
    pub label: String,
    pub kind: LeafKind,
    pub mode: SimMode,
    pub phases: Vec<PhaseRecord>,
    pub conditions: Vec<ConditionVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<TransferPlan>,
    /// Slot changes caused by the plan.
    pub changes: Vec<StateChange>,
    /// `None` when the leaf could not be resolved.
    pub outcome: Option<TickStatus>,
}

impl PhaseTranscript {
    /// True when some condition was judged unmet.
    pub fn has_unmet(&self) -> bool {
        self.conditions.iter().any(|c| !c.met)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunError {
    #[error("node `{node_id}`, {phase} phase: feedback limit exhausted: {message}")]
    Undelivered { node_id: String, phase: Phase, message: String },
    #[error("node `{node_id}`, {phase} phase: {message}")]
    Backend { node_id: String, phase: Phase, message: String },
}

impl RunError {
    fn from_feedback(node_id: &str, phase: Phase, e: FeedbackError<BackendError>) -> Self {
        match e {
            FeedbackError::Delivery(d) => {
                RunError::Undelivered { node_id: node_id.into(), phase, message: d.to_string() }
            }
            FeedbackError::Backend { source, .. } => {
                RunError::Backend { node_id: node_id.into(), phase, message: source.to_string() }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Root status; `None` when the run was not delivered.
    pub status: Option<TickStatus>,
    pub action_flow: Vec<FlowEntry>,
    pub initial: Snapshot,
    #[serde(rename = "final")]
    pub final_state: Snapshot,
    pub transcripts: Vec<PhaseTranscript>,
    pub delivered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RunError>,
}

// ---------------------------------------------------------------------------
// Model exchanges
// ---------------------------------------------------------------------------

pub(crate) struct Exchange<'a> {
    pub backend: &'a dyn Backend,
    pub config: &'a SimConfig,
}

impl Exchange<'_> {
    /// Sends `prompt`, checks each reply and re-asks with feedback. `check`
    /// returns the typed result plus the payload to record.
    pub(crate) fn run<T>(
        &self,
        phase: Phase,
        condition: Option<usize>,
        prompt: String,
        mut check: impl FnMut(&str, usize) -> Result<(T, Json), Vec<Violation>>,
    ) -> (PhaseRecord, Result<T, FeedbackError<BackendError>>) {
        let cfg = self.config;
        let mut messages = vec![Message::system(cfg.templates.system.clone()), Message::user(prompt.clone())];
        let mut usage = Usage::default();
        let mut latency_ms = 0;
        let mut accepted: Option<Json> = None;
        let result = with_feedback(
            cfg.max_feedback,
            &cfg.templates.feedback,
            |feedback| {
                if let Some(fb) = feedback {
                    messages.push(Message::user(fb));
                }
                let request = ChatRequest {
                    model: cfg.model.clone(),
                    messages: messages.clone(),
                    temperature: cfg.temperature,
                    max_tokens: cfg.max_tokens,
                    seed: cfg.seed,
                };
                let resp = self.backend.complete(&request)?;
                usage.prompt_tokens += resp.usage.prompt_tokens;
                usage.completion_tokens += resp.usage.completion_tokens;
                latency_ms += resp.latency_ms;
                messages.push(Message::assistant(resp.text.clone()));
                Ok(resp.text)
            },
            |raw, round| {
                let (value, payload) = check(raw, round)?;
                accepted = Some(payload);
                Ok(value)
            },
        );
        let (attempts, rounds, out) = match result {
            Ok(d) => (d.attempts, d.rounds, Ok(d.payload)),
            Err(FeedbackError::Delivery(failure)) => {
                let n = failure.history.len();
                (failure.history.clone(), n.saturating_sub(1), Err(FeedbackError::Delivery(failure)))
            }
            Err(FeedbackError::Backend { source, attempts }) => {
                let n = attempts.len();
                (attempts.clone(), n, Err(FeedbackError::Backend { source, attempts }))
            }
        };
        let record = PhaseRecord { phase, condition, prompt, attempts, payload: accepted, rounds, usage, latency_ms };
        (record, out)
    }
}

fn header(phase: Phase, node: &BtNode, extra: &str) -> String {
    let kind = if node.leaf_kind() == Some(LeafKind::Condition) { "condition" } else { "action" };
    format!("### phase: {phase} | node: {} | kind: {kind}{extra}", node.label)
}

fn kind_name(node: &BtNode) -> &'static str {
    if node.leaf_kind() == Some(LeafKind::Condition) {
        "condition"
    } else {
        "action"
    }
}

// ---------------------------------------------------------------------------
// Payload interpretation
// ---------------------------------------------------------------------------

fn parse_path(text: &str, pointer: String, out: &mut Vec<Violation>) -> Option<StatePath> {
    match text.parse::<StatePath>() {
        Ok(p) => Some(p),
        Err(e) => {
            out.push(Violation::at(ViolationKind::WrongType, pointer, e.to_string()));
            None
        }
    }
}

fn resolved_path(text: &str, pointer: String, state: &WorldState, out: &mut Vec<Violation>) -> Option<StatePath> {
    let path = parse_path(text, pointer.clone(), out)?;
    match state.query(&path) {
        Ok(_) => Some(path),
        Err(e) => {
            out.push(Violation::at(ViolationKind::DomainRule, pointer, format!("{e}; use a path listed in the state")));
            None
        }
    }
}

fn str_at<'a>(v: &'a Json, key: &str) -> &'a str {
    v.get(key).and_then(Json::as_str).unwrap_or("")
}

fn read_specs(payload: &Json, state: &WorldState, out: &mut Vec<Violation>) -> Vec<ConditionSpec> {
    let empty = Vec::new();
    let conditions = payload.get("conditions").and_then(Json::as_array).unwrap_or(&empty);
    let mut specs = Vec::new();
    for (i, c) in conditions.iter().enumerate() {
        let mut crucial = Vec::new();
        let paths = c.get("crucial_states").and_then(Json::as_array).unwrap_or(&empty);
        for (j, p) in paths.iter().enumerate() {
            let ptr = format!("/conditions/{i}/crucial_states/{j}");
            if let Some(path) = resolved_path(p.as_str().unwrap_or(""), ptr, state, out) {
                if !crucial.contains(&path) {
                    crucial.push(path);
                }
            }
        }
        specs.push(ConditionSpec { statement: str_at(c, "statement").to_string(), crucial_states: crucial });
    }
    specs
}

/// Binds, runs and traces a program object `{"source", "bindings"}`.
/// `allowed` restricts which paths may be bound.
fn run_program(
    program: &Json,
    pointer: &str,
    state: &WorldState,
    allowed: Option<&[StatePath]>,
    expected: OutputType,
    out: &mut Vec<Violation>,
) -> Option<ProgramTrace> {
    let source = str_at(program, "source").to_string();
    let mut bindings = BTreeMap::new();
    let mut values = BTreeMap::new();
    let before = out.len();
    if let Some(map) = program.get("bindings").and_then(Json::as_object) {
        for (name, p) in map {
            let ptr = format!("{pointer}/bindings/{name}");
            let Some(text) = p.as_str() else {
                out.push(Violation::at(ViolationKind::WrongType, ptr, "binding must be a state path string"));
                continue;
            };
            let Some(path) = resolved_path(text, ptr.clone(), state, out) else { continue };
            if allowed.is_some_and(|a| !a.contains(&path)) {
                out.push(Violation::at(
                    ViolationKind::DomainRule,
                    ptr,
                    format!("`{path}` is not one of the condition's crucial states"),
                ));
                continue;
            }
            values.insert(name.clone(), state.query(&path).expect("resolved above"));
            bindings.insert(name.clone(), path);
        }
    }
    if out.len() > before {
        return None;
    }
    let prog = Program { source: source.clone(), bindings: values.clone(), expected_output: expected };
    match code_reasoning::execute(&prog) {
        Ok(result) => Some(ProgramTrace { source, bindings, values, result }),
        Err(e) => {
            out.push(Violation::at(ViolationKind::CodeError, format!("{pointer}/source"), e.to_string()));
            None
        }
    }
}

fn output_type(v: &Value) -> Option<OutputType> {
    match v {
        Value::Bool(_) => Some(OutputType::Boolean),
        Value::Number { .. } => Some(OutputType::Number),
        Value::Vector { .. } => Some(OutputType::Vector),
        Value::Text(_) => None,
    }
}

fn with_unit(v: Value, unit: Option<&str>) -> Value {
    match (v, unit) {
        (Value::Number { value, .. }, Some(u)) => Value::Number { value, unit: u.to_string() },
        (Value::Vector { xyz, .. }, Some(u)) => Value::Vector { xyz, unit: u.to_string() },
        (v, _) => v,
    }
}

/// Reads and dry-applies a transfer list. The written paths must be exactly
/// `captured` (or, with `captured = None`, any distinct set).
fn read_transfers(
    items: &[Json],
    captured: Option<&[StatePath]>,
    state: &WorldState,
    code: bool,
    out: &mut Vec<Violation>,
) -> Vec<Transfer> {
    let mut transfers = Vec::new();
    let mut scratch = state.clone();
    let mut seen = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        let ptr = format!("/transfers/{i}");
        let Some(path) = parse_path(str_at(item, "path"), format!("{ptr}/path"), out) else { continue };
        if !seen.insert(path.clone()) {
            out.push(Violation::at(ViolationKind::DomainRule, format!("{ptr}/path"), format!("`{path}` is written twice")));
            continue;
        }
        if captured.is_some_and(|c| !c.contains(&path)) {
            out.push(Violation::at(
                ViolationKind::DomainRule,
                format!("{ptr}/path"),
                format!("`{path}` was not captured as a changing state"),
            ));
            continue;
        }
        let rationale = str_at(item, "rationale").to_string();
        let (value, program) = match (item.get("value"), item.get("program")) {
            (Some(_), Some(_)) | (None, None) => {
                out.push(Violation::at(ViolationKind::DomainRule, ptr, "give exactly one of \"value\" or \"program\""));
                continue;
            }
            (Some(v), None) => match serde_json::from_value::<Value>(v.clone()) {
                Ok(v) => (v, None),
                Err(e) => {
                    out.push(Violation::at(ViolationKind::WrongType, format!("{ptr}/value"), e.to_string()));
                    continue;
                }
            },
            (None, Some(p)) => {
                if !code {
                    out.push(Violation::at(
                        ViolationKind::DomainRule,
                        format!("{ptr}/program"),
                        "code reasoning is disabled; give a literal \"value\"",
                    ));
                    continue;
                }
                let current = state.query(&path).ok();
                let Some(expected) = current.as_ref().and_then(output_type) else {
                    out.push(Violation::at(
                        ViolationKind::DomainRule,
                        format!("{ptr}/program"),
                        "a program can only compute a new number, vector or boolean for an existing slot; give a literal \"value\"",
                    ));
                    continue;
                };
                let Some(trace) = run_program(p, &format!("{ptr}/program"), state, None, expected, out) else { continue };
                let unit = current.as_ref().and_then(Value::unit);
                let v = with_unit(trace.result.clone(), unit.or(Some(DIMENSIONLESS)));
                (v, Some(trace))
            }
        };
        if let Err(e) = scratch.insert(&path, value.clone()) {
            out.push(Violation::at(ViolationKind::DomainRule, ptr, e.to_string()));
            continue;
        }
        transfers.push(Transfer { path, value, rationale, program });
    }
    if let Some(captured) = captured {
        for p in captured {
            if !seen.contains(p) {
                out.push(Violation::at(
                    ViolationKind::DomainRule,
                    "/transfers",
                    format!("captured path `{p}` has no transfer"),
                ));
            }
        }
    }
    transfers
}

/// Held-object and distance reminders for a capture list.
fn capture_advice(captured: &[StatePath], state: &WorldState) -> Vec<Violation> {
    let set: BTreeSet<&StatePath> = captured.iter().collect();
    let mut out = Vec::new();
    let moved: Vec<&str> = captured
        .iter()
        .filter_map(|p| match p {
            StatePath::Entity { id, field: EntityField::Position } => Some(id.as_str()),
            _ => None,
        })
        .collect();
    for rel in state.relationships() {
        let holding = ["hold", "grasp", "carr"].iter().any(|k| rel.kind.contains(k))
            && rel.value.as_ref().is_none_or(|v| v.as_bool() == Some(true));
        if holding && moved.contains(&rel.subject.as_str()) {
            let held = StatePath::entity(&rel.object, "position");
            if !set.contains(&held) {
                out.push(Violation::at(
                    ViolationKind::DomainRule,
                    "/captured",
                    format!(
                        "`{}` moves while holding `{}`; confirm whether `{held}` changes too and capture it if so",
                        rel.subject, rel.object
                    ),
                ));
            }
        }
        let distance = rel.kind.contains("distance") || rel.kind.contains("near");
        if distance && (moved.contains(&rel.subject.as_str()) || moved.contains(&rel.object.as_str())) {
            let path = StatePath::relation(&rel.kind, &rel.subject, &rel.object);
            if !set.contains(&path) {
                out.push(Violation::at(
                    ViolationKind::DomainRule,
                    "/captured",
                    format!("`{path}` involves a moving entity; confirm whether it changes and capture it if so"),
                ));
            }
        }
    }
    out
}

fn accept<T>(value: T, payload: Json, violations: Vec<Violation>) -> Result<(T, Json), Vec<Violation>> {
    if violations.is_empty() {
        Ok((value, payload))
    } else {
        Err(violations)
    }
}

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

/// The task and state a leaf is resolved against.
pub struct LeafContext<'a> {
    pub task: &'a str,
    pub backend: &'a dyn Backend,
    pub config: &'a SimConfig,
}

impl LeafContext<'_> {
    fn exchange(&self) -> Exchange<'_> {
        Exchange { backend: self.backend, config: self.config }
    }
}

pub fn consider(
    node: &BtNode,
    state: &WorldState,
    ctx: &LeafContext<'_>,
) -> (PhaseRecord, Result<Vec<ConditionSpec>, FeedbackError<BackendError>>) {
    let t = &ctx.config.templates;
    let schema = &schemas().consider;
    let prompt = fill(
        &t.consider,
        &[
            ("header", &header(Phase::Consider, node, "")),
            ("task", ctx.task),
            ("node_label", &node.label),
            ("node_kind", kind_name(node)),
            ("node_description", &node.description),
            ("state", &state.render_slots()),
            ("schema", &schema_text(schema)),
        ],
    );
    ctx.exchange().run(Phase::Consider, None, prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let mut v = check_semantics(&payload, &[]);
        let specs = read_specs(&payload, state, &mut v);
        accept(specs, payload, v)
    })
}

/// The decide mode `config` selects for a condition over `state`.
pub fn decide_mode(spec: &ConditionSpec, state: &WorldState, config: &SimConfig) -> DecideMode {
    let values: Vec<Value> = spec.crucial_states.iter().filter_map(|p| state.query(p).ok()).collect();
    if config.code_reasoning && code_reasoning::needs_code(&values) {
        DecideMode::Code
    } else {
        DecideMode::Semantic
    }
}

pub fn decide(
    node: &BtNode,
    index: usize,
    spec: &ConditionSpec,
    state: &WorldState,
    ctx: &LeafContext<'_>,
) -> (PhaseRecord, Result<ConditionVerdict, FeedbackError<BackendError>>) {
    let t = &ctx.config.templates;
    let mode = decide_mode(spec, state, ctx.config);
    let (schema, instructions) = match mode {
        DecideMode::Code => {
            (&schemas().decide_code, fill(&t.decide_code, &[("grammar", code_reasoning::GRAMMAR)]))
        }
        DecideMode::Semantic => (&schemas().decide_semantic, t.decide_semantic.clone()),
    };
    let crucial: String = spec
        .crucial_states
        .iter()
        .map(|p| format!("- {p} = {}\n", state.query(p).map(|v| v.to_string()).unwrap_or_default()))
        .collect();
    let extra = format!(" | condition: {} | mode: {mode}", spec.statement);
    let prompt = fill(
        &t.decide,
        &[
            ("header", &header(Phase::Decide, node, &extra)),
            ("task", ctx.task),
            ("node_label", &node.label),
            ("node_kind", kind_name(node)),
            ("condition", &spec.statement),
            ("crucial_states", &crucial),
            ("state", &state.render_slots()),
            ("instructions", instructions.trim_end()),
            ("schema", &schema_text(schema)),
        ],
    );
    ctx.exchange().run(Phase::Decide, Some(index), prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let rationale = str_at(&payload, "reasoning").to_string();
        match mode {
            DecideMode::Semantic => {
                let v = check_semantics(&payload, &[]);
                let met = payload.get("met").and_then(Json::as_bool).unwrap_or(false);
                let verdict = ConditionVerdict { spec: spec.clone(), met, mode, rationale, program: None };
                accept(verdict, payload, v)
            }
            DecideMode::Code => {
                let mut v = Vec::new();
                let program = payload.get("program").cloned().unwrap_or(Json::Null);
                let trace =
                    run_program(&program, "/program", state, Some(&spec.crucial_states), OutputType::Boolean, &mut v);
                let Some(trace) = trace else { return Err(v) };
                let met = trace.result.as_bool().expect("boolean output checked by the sandbox");
                let verdict = ConditionVerdict { spec: spec.clone(), met, mode, rationale, program: Some(trace) };
                accept(verdict, payload, v)
            }
        }
    })
}

pub fn capture(
    node: &BtNode,
    state: &WorldState,
    ctx: &LeafContext<'_>,
) -> (PhaseRecord, Result<Vec<StatePath>, FeedbackError<BackendError>>) {
    let t = &ctx.config.templates;
    let schema = &schemas().capture;
    let prompt = fill(
        &t.capture,
        &[
            ("header", &header(Phase::Capture, node, "")),
            ("task", ctx.task),
            ("node_label", &node.label),
            ("node_description", &node.description),
            ("state", &state.render_slots()),
            ("schema", &schema_text(schema)),
        ],
    );
    let advise = ctx.config.max_feedback > 0;
    ctx.exchange().run(Phase::Capture, None, prompt, |raw, round| {
        let payload = parse_checked(raw, schema)?;
        let mut v = Vec::new();
        let mut captured = Vec::new();
        let empty = Vec::new();
        for (i, p) in payload.get("captured").and_then(Json::as_array).unwrap_or(&empty).iter().enumerate() {
            let ptr = format!("/captured/{i}");
            let Some(path) = parse_path(p.as_str().unwrap_or(""), ptr.clone(), &mut v) else { continue };
            if !state.addressable(&path) {
                v.push(Violation::at(ViolationKind::DomainRule, ptr, format!("`{path}` does not exist and cannot be created")));
            } else if captured.contains(&path) {
                v.push(Violation::at(ViolationKind::DomainRule, ptr, format!("`{path}` is listed twice")));
            } else {
                captured.push(path);
            }
        }
        if v.is_empty() && advise && round == 0 {
            v = capture_advice(&captured, state);
        }
        accept(captured, payload, v)
    })
}

pub fn transfer(
    node: &BtNode,
    captured: &[StatePath],
    state: &WorldState,
    ctx: &LeafContext<'_>,
) -> (PhaseRecord, Result<TransferPlan, FeedbackError<BackendError>>) {
    let t = &ctx.config.templates;
    let schema = &schemas().transfer;
    let listed: String = captured
        .iter()
        .map(|p| match state.query(p) {
            Ok(v) => format!("- {p} (currently {v})\n"),
            Err(_) => format!("- {p} (new)\n"),
        })
        .collect();
    let code_hint = if ctx.config.code_reasoning {
        "For a numeric result you may give a \"program\" in the sandbox language instead of a literal \"value\"."
    } else {
        "Give every new value as a literal \"value\"."
    };
    let prompt = fill(
        &t.transfer,
        &[
            ("header", &header(Phase::Transfer, node, "")),
            ("task", ctx.task),
            ("node_label", &node.label),
            ("node_description", &node.description),
            ("state", &state.render_slots()),
            ("captured", &listed),
            ("code_hint", code_hint),
            ("schema", &schema_text(schema)),
        ],
    );
    ctx.exchange().run(Phase::Transfer, None, prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let mut v = Vec::new();
        let items = payload.get("transfers").and_then(Json::as_array).cloned().unwrap_or_default();
        let transfers = read_transfers(&items, Some(captured), state, ctx.config.code_reasoning, &mut v);
        let plan = TransferPlan { captured_paths: captured.to_vec(), transfers };
        accept(plan, payload, v)
    })
}

struct SingleOutcome {
    verdicts: Vec<ConditionVerdict>,
    feasible: bool,
    plan: Option<TransferPlan>,
}

fn single_phase(
    node: &BtNode,
    state: &WorldState,
    ctx: &LeafContext<'_>,
) -> (PhaseRecord, Result<SingleOutcome, FeedbackError<BackendError>>) {
    let t = &ctx.config.templates;
    let schema = &schemas().single_phase;
    let code = ctx.config.code_reasoning;
    let code_hint = if code {
        "When a condition depends on numbers or positions, do not compare them in prose: give a boolean \"program\" in the sandbox language below instead of \"met\", binding its names to crucial state paths.\n\n"
            .to_string()
            + code_reasoning::GRAMMAR
    } else {
        "Give \"met\" for every condition and literal values for every transfer.".to_string()
    };
    let prompt = fill(
        &t.single_phase,
        &[
            ("header", &header(Phase::SinglePhase, node, "")),
            ("task", ctx.task),
            ("node_label", &node.label),
            ("node_kind", kind_name(node)),
            ("node_description", &node.description),
            ("state", &state.render_slots()),
            ("code_hint", code_hint.trim_end()),
            ("schema", &schema_text(schema)),
        ],
    );
    let is_action = node.leaf_kind() == Some(LeafKind::Action);
    ctx.exchange().run(Phase::SinglePhase, None, prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let mut v = Vec::new();
        let specs = read_specs(&payload, state, &mut v);
        if !v.is_empty() {
            return Err(v);
        }
        let conditions = payload["conditions"].as_array().cloned().unwrap_or_default();
        let mut verdicts = Vec::new();
        let mut filled = payload.clone();
        for (i, (c, spec)) in conditions.iter().zip(specs).enumerate() {
            let ptr = format!("/conditions/{i}");
            let mode = decide_mode(&spec, state, ctx.config);
            let rationale = str_at(c, "reasoning").to_string();
            let (met, program) = match (mode, c.get("program"), c.get("met").and_then(Json::as_bool)) {
                (DecideMode::Code, Some(p), _) => {
                    match run_program(p, &format!("{ptr}/program"), state, Some(&spec.crucial_states), OutputType::Boolean, &mut v) {
                        Some(trace) => (trace.result.as_bool().expect("boolean output"), Some(trace)),
                        None => continue,
                    }
                }
                (DecideMode::Code, None, _) => {
                    v.push(Violation::at(
                        ViolationKind::MissingKey,
                        &ptr,
                        "this condition depends on numeric states; give a \"program\" instead of \"met\"",
                    ));
                    continue;
                }
                (DecideMode::Semantic, Some(_), _) => {
                    let why = if code { "its crucial states are not numeric" } else { "code reasoning is disabled" };
                    v.push(Violation::at(ViolationKind::DomainRule, format!("{ptr}/program"), format!("{why}; give \"met\" instead of a program")));
                    continue;
                }
                (DecideMode::Semantic, None, Some(met)) => (met, None),
                (DecideMode::Semantic, None, None) => {
                    v.push(Violation::at(ViolationKind::MissingKey, &ptr, "missing required key \"met\""));
                    continue;
                }
            };
            filled["conditions"][i]["met"] = Json::Bool(met);
            verdicts.push(ConditionVerdict { spec, met, mode, rationale, program });
        }
        if !v.is_empty() {
            return Err(v);
        }
        v.extend(check_semantics(&filled, &[]));
        let feasible = verdicts.iter().all(|c| c.met);
        let items = payload["transfers"].as_array().cloned().unwrap_or_default();
        let plan = if !is_action || !feasible {
            if !items.is_empty() {
                let why = if is_action { "an infeasible action" } else { "a condition node" };
                v.push(Violation::at(ViolationKind::DomainRule, "/transfers", format!("{why} changes nothing; leave \"transfers\" empty")));
            }
            None
        } else if items.is_empty() {
            v.push(Violation::at(ViolationKind::DomainRule, "/transfers", "a feasible action must list the states it changes"));
            None
        } else {
            let transfers = read_transfers(&items, None, state, code, &mut v);
            let captured = transfers.iter().map(|t| t.path.clone()).collect();
            Some(TransferPlan { captured_paths: captured, transfers })
        };
        accept(SingleOutcome { verdicts, feasible, plan }, filled, v)
    })
}

// ---------------------------------------------------------------------------
// Leaves and runs
// ---------------------------------------------------------------------------

/// Resolves one leaf and, for a feasible action, applies its plan to `state`.
pub fn simulate_leaf(
    node: &BtNode,
    state: &mut WorldState,
    ctx: &LeafContext<'_>,
) -> (Result<TickStatus, RunError>, PhaseTranscript) {
    let kind = node.leaf_kind().expect("simulate_leaf needs a leaf");
    let mut tr = PhaseTranscript {
        node_id: node.id.clone(),
        label: node.label.clone(),
        kind,
        mode: ctx.config.mode,
        phases: Vec::new(),
        conditions: Vec::new(),
        plan: None,
        changes: Vec::new(),
        outcome: None,
    };
    let result = match ctx.config.mode {
        SimMode::Cbs => run_cbs(node, kind, state, ctx, &mut tr),
        SimMode::SinglePhase => run_single(node, kind, state, ctx, &mut tr),
    };
    tr.outcome = result.as_ref().ok().copied();
    (result, tr)
}

fn apply_plan(plan: &TransferPlan, state: &mut WorldState, tr: &mut PhaseTranscript) -> Result<(), RunError> {
    let before = state.clone();
    plan.apply(state).map_err(|e| RunError::Backend {
        node_id: tr.node_id.clone(),
        phase: Phase::Transfer,
        message: format!("plan could not be applied: {e}"),
    })?;
    tr.changes = diff(&before, state);
    tr.plan = Some(plan.clone());
    Ok(())
}

fn run_cbs(
    node: &BtNode,
    kind: LeafKind,
    state: &mut WorldState,
    ctx: &LeafContext<'_>,
    tr: &mut PhaseTranscript,
) -> Result<TickStatus, RunError> {
    let id = node.id.clone();
    let (rec, specs) = consider(node, state, ctx);
    tr.phases.push(rec);
    let specs = specs.map_err(|e| RunError::from_feedback(&id, Phase::Consider, e))?;
    for (i, spec) in specs.iter().enumerate() {
        let (rec, verdict) = decide(node, i, spec, state, ctx);
        tr.phases.push(rec);
        tr.conditions.push(verdict.map_err(|e| RunError::from_feedback(&id, Phase::Decide, e))?);
    }
    if tr.has_unmet() {
        return Ok(TickStatus::Failure);
    }
    if kind == LeafKind::Condition {
        return Ok(TickStatus::Success);
    }
    let (rec, captured) = capture(node, state, ctx);
    tr.phases.push(rec);
    let captured = captured.map_err(|e| RunError::from_feedback(&id, Phase::Capture, e))?;
    let (rec, plan) = transfer(node, &captured, state, ctx);
    tr.phases.push(rec);
    let plan = plan.map_err(|e| RunError::from_feedback(&id, Phase::Transfer, e))?;
    apply_plan(&plan, state, tr)?;
    Ok(TickStatus::Success)
}

fn run_single(
    node: &BtNode,
    kind: LeafKind,
    state: &mut WorldState,
    ctx: &LeafContext<'_>,
    tr: &mut PhaseTranscript,
) -> Result<TickStatus, RunError> {
    let (rec, out) = single_phase(node, state, ctx);
    tr.phases.push(rec);
    let out = out.map_err(|e| RunError::from_feedback(&node.id, Phase::SinglePhase, e))?;
    tr.conditions = out.verdicts;
    if !out.feasible {
        return Ok(TickStatus::Failure);
    }
    if let (LeafKind::Action, Some(plan)) = (kind, out.plan) {
        apply_plan(&plan, state, tr)?;
    }
    Ok(TickStatus::Success)
}

/// One root tick of `tree` from the case's initial state.
pub fn simulate_run(
    case: &SimulationCase,
    tree: &BehaviorTree,
    backend: &dyn Backend,
    config: &SimConfig,
    sink: &mut dyn EventSink,
) -> RunResult {
    let initial = case.initial_state.snapshot();
    let mut state = case.initial_state.clone();
    let mut transcripts = Vec::new();
    let ctx = LeafContext { task: &case.goal.task_description, backend, config };
    let mut executor = |node: &BtNode| -> Result<TickStatus, RunError> {
        sink.emit(Event::LeafStart { node_id: node.id.clone(), label: node.label.clone() });
        let (result, tr) = simulate_leaf(node, &mut state, &ctx);
        for rec in &tr.phases {
            sink.emit(Event::Phase { node_id: node.id.clone(), record: rec.clone() });
        }
        sink.emit(Event::LeafEnd { node_id: node.id.clone(), outcome: tr.outcome, changes: tr.changes.clone() });
        transcripts.push(tr);
        result
    };
    let outcome = tick(tree, &mut executor);
    let (status, action_flow, error) = match outcome {
        Ok(o) => (Some(o.status), o.action_flow, None),
        Err(e) => (None, e.action_flow, Some(e.source)),
    };
    RunResult {
        status,
        action_flow,
        initial,
        final_state: state.snapshot(),
        transcripts,
        delivered: error.is_none(),
        error,
    }
}
