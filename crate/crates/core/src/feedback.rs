//! Content checking of model output and the bounded re-ask loop.
//!
//! Every backend response goes through [`with_feedback`]: the response is
//! parsed and checked, and any violations are rendered into a feedback
//! message that is sent back with the next ask. The loop gives up after
//! `max_rounds` re-asks.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::code_reasoning;

pub const DEFAULT_MAX_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    NotJson,
    MissingKey,
    WrongType,
    CodeError,
    SemanticInconsistency,
    DomainRule,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One problem found in a response. `detail` is quoted verbatim in the
/// feedback message, so it should say what to change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointer: Option<String>,
}

impl Violation {
    pub fn new(kind: ViolationKind, detail: impl Into<String>) -> Self {
        Violation { kind, detail: detail.into(), pointer: None }
    }

    pub fn at(kind: ViolationKind, pointer: impl Into<String>, detail: impl Into<String>) -> Self {
        Violation { kind, detail: detail.into(), pointer: Some(pointer.into()) }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.pointer {
            Some(p) if !p.is_empty() => write!(f, "[{}] at {}: {}", self.kind, p, self.detail),
            _ => write!(f, "[{}] {}", self.kind, self.detail),
        }
    }
}

fn child_pointer(parent: &str, key: &str) -> String {
    let escaped = key.replace('~', "~0").replace('/', "~1");
    format!("{parent}/{escaped}")
}

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
#[error("invalid schema document: {0}")]
pub struct SchemaError(String);

/// A JSON Schema document, interpreted over the subset the phase schemas use:
/// `type`, `required`, `properties`, `items`, `minItems`, `enum`, `anyOf`
/// and local `$ref`s into `$defs`.
#[derive(Debug, Clone)]
pub struct Schema {
    root: Json,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Schema, SchemaError> {
        let root: Json = serde_json::from_str(text).map_err(|e| SchemaError(e.to_string()))?;
        if !root.is_object() {
            return Err(SchemaError("top level must be an object".into()));
        }
        Ok(Schema { root })
    }

    pub fn document(&self) -> &Json {
        &self.root
    }

    pub fn validate(&self, instance: &Json) -> Vec<Violation> {
        let mut out = Vec::new();
        self.check(&self.root, instance, "", &mut out);
        out
    }

    fn resolve<'a>(&'a self, node: &'a Json) -> &'a Json {
        let mut node = node;
        // bounded to guard against reference cycles
        for _ in 0..16 {
            let Some(r) = node.get("$ref").and_then(Json::as_str) else { break };
            let target = r
                .strip_prefix("#/")
                .and_then(|path| self.root.pointer(&format!("/{path}")))
                .unwrap_or_else(|| panic!("unresolvable schema reference {r}"));
            node = target;
        }
        node
    }

    fn check(&self, node: &Json, value: &Json, pointer: &str, out: &mut Vec<Violation>) {
        let node = self.resolve(node);
        if let Some(options) = node.get("anyOf").and_then(Json::as_array) {
            let fits = options.iter().any(|o| {
                let mut scratch = Vec::new();
                self.check(o, value, pointer, &mut scratch);
                scratch.is_empty()
            });
            if !fits {
                let expected = node
                    .get("description")
                    .and_then(Json::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| options.iter().map(|o| self.describe(o)).collect::<Vec<_>>().join(" or "));
                out.push(Violation::at(
                    ViolationKind::WrongType,
                    pointer,
                    format!("expected {expected}, found {}", describe_value(value)),
                ));
                return;
            }
        }
        if let Some(t) = node.get("type") {
            let allowed: Vec<&str> = match t {
                Json::String(s) => vec![s.as_str()],
                Json::Array(a) => a.iter().filter_map(Json::as_str).collect(),
                _ => vec![],
            };
            if !allowed.iter().any(|t| type_matches(t, value)) {
                out.push(Violation::at(
                    ViolationKind::WrongType,
                    pointer,
                    format!("expected {}, found {}", allowed.join(" or "), describe_value(value)),
                ));
                return;
            }
        }
        if let Some(options) = node.get("enum").and_then(Json::as_array) {
            if !options.contains(value) {
                let list: Vec<String> = options.iter().map(Json::to_string).collect();
                out.push(Violation::at(
                    ViolationKind::DomainRule,
                    pointer,
                    format!("must be one of {}, found {}", list.join(", "), value),
                ));
            }
        }
        if let Json::Object(map) = value {
            if let Some(required) = node.get("required").and_then(Json::as_array) {
                for key in required.iter().filter_map(Json::as_str) {
                    if !map.contains_key(key) {
                        out.push(Violation::at(
                            ViolationKind::MissingKey,
                            pointer,
                            format!("missing required key \"{key}\""),
                        ));
                    }
                }
            }
            if let Some(props) = node.get("properties").and_then(Json::as_object) {
                for (key, sub) in props {
                    if let Some(v) = map.get(key) {
                        self.check(sub, v, &child_pointer(pointer, key), out);
                    }
                }
            }
        }
        if let Json::Array(items) = value {
            if let Some(min) = node.get("minItems").and_then(Json::as_u64) {
                if (items.len() as u64) < min {
                    out.push(Violation::at(
                        ViolationKind::DomainRule,
                        pointer,
                        format!("needs at least {min} item(s), found {}", items.len()),
                    ));
                }
            }
            if let Some(sub) = node.get("items") {
                for (i, item) in items.iter().enumerate() {
                    self.check(sub, item, &format!("{pointer}/{i}"), out);
                }
            }
        }
    }

    fn describe(&self, node: &Json) -> String {
        let node = self.resolve(node);
        if let Some(d) = node.get("description").and_then(Json::as_str) {
            return d.to_string();
        }
        match node.get("type") {
            Some(Json::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => "a value".into(),
        }
    }
}

fn type_matches(t: &str, v: &Json) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        _ => false,
    }
}

fn describe_value(v: &Json) -> String {
    let text = v.to_string();
    let shown = if text.chars().count() > 60 { format!("{}...", text.chars().take(60).collect::<String>()) } else { text };
    let kind = match v {
        Json::Null => "null",
        Json::Bool(_) => "boolean",
        Json::Number(_) => "number",
        Json::String(_) => "string",
        Json::Array(_) => "array",
        Json::Object(_) => "object",
    };
    format!("{kind} {shown}")
}

// ---------------------------------------------------------------------------
// Syntax checks
// ---------------------------------------------------------------------------

/// Removes one surrounding markdown code fence, if present.
pub fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let Some(body) = rest.strip_suffix("```") else { return t };
    // drop the info string (e.g. `json`) on the opening line
    match body.find('\n') {
        Some(nl) if body[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => body[nl + 1..].trim(),
        _ => body.trim(),
    }
}

/// Parses `raw`, validates it against `schema` and syntax-checks embedded
/// programs. Returns the parsed payload when nothing is wrong.
pub fn parse_checked(raw: &str, schema: &Schema) -> Result<Json, Vec<Violation>> {
    let payload: Json = match serde_json::from_str(strip_fence(raw)) {
        Ok(v) => v,
        Err(e) => {
            return Err(vec![Violation::new(
                ViolationKind::NotJson,
                format!("response is not a single valid JSON document ({e}); reply with JSON only"),
            )])
        }
    };
    let mut violations = schema.validate(&payload);
    check_programs(&payload, "", &mut violations);
    if violations.is_empty() {
        Ok(payload)
    } else {
        Err(violations)
    }
}

pub fn check_syntax(raw: &str, schema: &Schema) -> Vec<Violation> {
    parse_checked(raw, schema).err().unwrap_or_default()
}

/// Dry-runs the front end on every `program` object: the source must parse
/// and may only read names listed in its `bindings`.
fn check_programs(v: &Json, pointer: &str, out: &mut Vec<Violation>) {
    match v {
        Json::Object(map) => {
            for (key, child) in map {
                let p = child_pointer(pointer, key);
                if key == "program" {
                    if let Some(source) = child.get("source").and_then(Json::as_str) {
                        check_program(source, child.get("bindings"), &p, out);
                    }
                } else {
                    check_programs(child, &p, out);
                }
            }
        }
        Json::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                check_programs(item, &format!("{pointer}/{i}"), out);
            }
        }
        _ => {}
    }
}

fn check_program(source: &str, bindings: Option<&Json>, pointer: &str, out: &mut Vec<Violation>) {
    match code_reasoning::referenced_names(source) {
        Err(e) => out.push(Violation::at(ViolationKind::CodeError, format!("{pointer}/source"), e.to_string())),
        Ok(names) => {
            let bound = bindings.and_then(Json::as_object);
            for name in names {
                if !bound.is_some_and(|b| b.contains_key(&name)) {
                    out.push(Violation::at(
                        ViolationKind::CodeError,
                        format!("{pointer}/source"),
                        format!("name `{name}` is used but not listed in `bindings`"),
                    ));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Semantic checks
// ---------------------------------------------------------------------------

const OVERALL_KEYS: [&str; 3] = ["feasible", "all_met", "satisfied"];

/// Phrases that, in the concluding sentence of a rationale, assert that the
/// condition does not hold.
const NEGATIONS: [&str; 12] = [
    "not met",
    "is unmet",
    "are unmet",
    "not satisfied",
    "unsatisfied",
    "not fulfilled",
    "infeasible",
    "not feasible",
    "cannot be met",
    "can't be met",
    "does not hold",
    "doesn't hold",
];

/// A caller-supplied rule over a parsed payload.
pub type DomainCheck<'a> = dyn Fn(&Json) -> Vec<Violation> + 'a;

/// Rule-based consistency checks: the overall verdict must equal the
/// conjunction of per-condition results, and a rationale whose conclusion
/// denies the condition must not come with `met: true`. `extra` rules run
/// afterwards.
pub fn check_semantics(payload: &Json, extra: &[&DomainCheck<'_>]) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(conditions) = payload.get("conditions").and_then(Json::as_array) {
        let mets: Vec<Option<bool>> = conditions.iter().map(|c| c.get("met").and_then(Json::as_bool)).collect();
        for key in OVERALL_KEYS {
            let Some(overall) = payload.get(key).and_then(Json::as_bool) else { continue };
            if mets.iter().all(Option::is_some) {
                let all = mets.iter().all(|m| *m == Some(true));
                if overall != all {
                    let listed: Vec<String> = mets.iter().map(|m| m.unwrap().to_string()).collect();
                    out.push(Violation::at(
                        ViolationKind::SemanticInconsistency,
                        format!("/{key}"),
                        format!(
                            "\"{key}\" is {overall} but the per-condition results are [{}]; it must be true exactly when every condition is met",
                            listed.join(", ")
                        ),
                    ));
                }
            }
        }
        for (i, c) in conditions.iter().enumerate() {
            check_rationale(c, &format!("/conditions/{i}"), &mut out);
        }
    }
    check_rationale(payload, "", &mut out);
    for rule in extra {
        out.extend(rule(payload));
    }
    out
}

fn check_rationale(obj: &Json, pointer: &str, out: &mut Vec<Violation>) {
    let Some(reasoning) = obj.get("reasoning").and_then(Json::as_str) else { return };
    let Some(met) = obj.get("met").and_then(Json::as_bool) else { return };
    if met && denies(reasoning) {
        out.push(Violation::at(
            ViolationKind::SemanticInconsistency,
            child_pointer(pointer, "met"),
            "\"met\" is true but the reasoning concludes that the condition does not hold; make them agree",
        ));
    }
}

fn last_sentence(text: &str) -> &str {
    let t = text.trim().trim_end_matches(['.', '!', '?', ' ']);
    match t.rfind(['.', '!', '?', '\n']) {
        Some(i) => &t[i + 1..],
        None => t,
    }
}

/// True when the concluding sentence of `reasoning` asserts non-fulfilment.
pub fn denies(reasoning: &str) -> bool {
    let last = last_sentence(reasoning).to_lowercase();
    NEGATIONS.iter().any(|n| last.contains(n))
}

// ---------------------------------------------------------------------------
// Re-ask loop
// ---------------------------------------------------------------------------

/// One request/response exchange inside the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub response: String,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct Delivered<T> {
    pub payload: T,
    /// Re-asks needed; the backend was called `rounds + 1` times.
    pub rounds: usize,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("no valid response after {} attempt(s); last problems: {}", history.len(), last_problems(history))]
pub struct DeliveryFailure {
    pub history: Vec<Attempt>,
}

fn last_problems(history: &[Attempt]) -> String {
    history
        .last()
        .map(|a| a.violations.iter().map(Violation::to_string).collect::<Vec<_>>().join("; "))
        .unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum FeedbackError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Delivery(#[from] DeliveryFailure),
    #[error("backend error: {source}")]
    Backend {
        source: E,
        attempts: Vec<Attempt>,
    },
}

pub const FEEDBACK_TEMPLATE: &str = include_str!("../templates/feedback.txt");

/// Fills `{violations}` in the feedback template.
pub fn render_feedback(template: &str, violations: &[Violation]) -> String {
    let list: Vec<String> = violations.iter().map(|v| format!("- {v}")).collect();
    template.replace("{violations}", &list.join("\n"))
}

/// Asks, checks, and re-asks with feedback until a response passes or
/// `max_rounds` re-asks have been spent. `ask` receives the feedback message
/// for re-asks and `None` on the first call; `check` receives the raw
/// response and the round number (0 for the first response).
pub fn with_feedback<T, E, A, C>(
    max_rounds: usize,
    template: &str,
    mut ask: A,
    mut check: C,
) -> Result<Delivered<T>, FeedbackError<E>>
where
    E: std::error::Error + 'static,
    A: FnMut(Option<&str>) -> Result<String, E>,
    C: FnMut(&str, usize) -> Result<T, Vec<Violation>>,
{
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut feedback: Option<String> = None;
    for round in 0..=max_rounds {
        let response = match ask(feedback.as_deref()) {
            Ok(r) => r,
            Err(source) => return Err(FeedbackError::Backend { source, attempts }),
        };
        match check(&response, round) {
            Ok(payload) => {
                attempts.push(Attempt { feedback, response, violations: Vec::new() });
                return Ok(Delivered { payload, rounds: round, attempts });
            }
            Err(mut violations) => {
                if violations.is_empty() {
                    violations.push(Violation::new(ViolationKind::DomainRule, "response rejected"));
                }
                let next = render_feedback(template, &violations);
                attempts.push(Attempt { feedback, response, violations });
                feedback = Some(next);
            }
        }
    }
    Err(DeliveryFailure { history: attempts }.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const DECIDE: &str = r##"{
        "type": "object",
        "required": ["conditions", "feasible"],
        "properties": {
            "conditions": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/cond"}},
            "feasible": {"type": "boolean"},
            "mode": {"enum": ["a", "b"]},
            "value": {"anyOf": [{"type": "boolean"}, {"type": "string"}], "description": "a boolean or a string"}
        },
        "$defs": {
            "cond": {
                "type": "object",
                "required": ["statement", "met"],
                "properties": {"statement": {"type": "string"}, "met": {"type": "boolean"}, "n": {"type": "integer"}}
            }
        }
    }"##;

    fn kinds(v: &[Violation]) -> Vec<ViolationKind> {
        v.iter().map(|x| x.kind).collect()
    }

    #[test]
    fn valid_payload_has_no_violations() {
        let s = Schema::parse(DECIDE).unwrap();
        let raw = r#"{"conditions":[{"statement":"x","met":true,"n":3}],"feasible":true}"#;
        assert_eq!(check_syntax(raw, &s), vec![]);
    }

    #[test]
    fn fenced_json_is_accepted() {
        let s = Schema::parse(DECIDE).unwrap();
        let raw = "```json\n{\"conditions\":[{\"statement\":\"x\",\"met\":true}],\"feasible\":true}\n```";
        assert!(parse_checked(raw, &s).is_ok());
        assert_eq!(strip_fence("```\n{}\n```"), "{}");
    }

    #[test]
    fn syntax_violation_kinds() {
        let s = Schema::parse(DECIDE).unwrap();
        assert_eq!(kinds(&check_syntax("not json", &s)), [ViolationKind::NotJson]);
        assert_eq!(kinds(&check_syntax(r#"{"feasible":true}"#, &s)), [ViolationKind::MissingKey]);
        let v = check_syntax(r#"{"conditions":[{"statement":"x","met":"true"}],"feasible":true}"#, &s);
        assert_eq!(kinds(&v), [ViolationKind::WrongType]);
        assert_eq!(v[0].pointer.as_deref(), Some("/conditions/0/met"));
        let v = check_syntax(r#"{"conditions":[],"feasible":true,"mode":"c"}"#, &s);
        assert_eq!(kinds(&v), [ViolationKind::DomainRule, ViolationKind::DomainRule]);
        let v = check_syntax(r#"{"conditions":[{"statement":"x","met":true,"n":1.5}],"feasible":true,"value":3}"#, &s);
        assert_eq!(kinds(&v), [ViolationKind::WrongType, ViolationKind::WrongType]);
        assert!(v[1].detail.contains("a boolean or a string"));
        assert_eq!(v[1].pointer.as_deref(), Some("/value"));
    }

    #[test]
    fn programs_are_dry_run() {
        let s = Schema::parse(r#"{"type":"object"}"#).unwrap();
        let ok = r#"{"program":{"source":"dist(a,b) <= r","bindings":{"a":"p","b":"q","r":"s"}}}"#;
        assert_eq!(check_syntax(ok, &s), vec![]);
        let bad = r#"{"x":[{"program":{"source":"dist(a,b) <=","bindings":{}}}]}"#;
        let v = check_syntax(bad, &s);
        assert_eq!(kinds(&v), [ViolationKind::CodeError]);
        assert_eq!(v[0].pointer.as_deref(), Some("/x/0/program/source"));
        let unbound = r#"{"program":{"source":"a < b","bindings":{"a":"p"}}}"#;
        assert_eq!(kinds(&check_syntax(unbound, &s)), [ViolationKind::CodeError]);
    }

    #[test]
    fn conjunction_rule() {
        let p = json!({"conditions": [{"met": true}, {"met": false}], "feasible": true});
        assert_eq!(kinds(&check_semantics(&p, &[])), [ViolationKind::SemanticInconsistency]);
        let p = json!({"conditions": [{"met": true}, {"met": false}], "feasible": false});
        assert_eq!(check_semantics(&p, &[]), vec![]);
        let p = json!({"conditions": [{"met": true}], "feasible": true});
        assert_eq!(check_semantics(&p, &[]), vec![]);
    }

    #[test]
    fn negation_heuristic_uses_the_conclusion() {
        let p = json!({"reasoning": "The rag is held. Therefore the condition is not met.", "met": true});
        assert_eq!(kinds(&check_semantics(&p, &[])), [ViolationKind::SemanticInconsistency]);
        let p = json!({"reasoning": "At first it looked not met. After checking, the condition is met.", "met": true});
        assert_eq!(check_semantics(&p, &[]), vec![]);
        let p = json!({"reasoning": "The condition is not met.", "met": false});
        assert_eq!(check_semantics(&p, &[]), vec![]);
    }

    #[test]
    fn extra_domain_rules_run() {
        let captured = ["entity:r.position"];
        let rule = |p: &Json| -> Vec<Violation> {
            p["transfers"]
                .as_array()
                .unwrap()
                .iter()
                .filter(|t| !captured.contains(&t["path"].as_str().unwrap()))
                .map(|t| Violation::new(ViolationKind::DomainRule, format!("{} was not captured", t["path"])))
                .collect()
        };
        let p = json!({"transfers": [{"path": "entity:r.position"}, {"path": "entity:b.position"}]});
        assert_eq!(kinds(&check_semantics(&p, &[&rule])), [ViolationKind::DomainRule]);
    }

    #[derive(Debug, Error)]
    #[error("offline")]
    struct Offline;

    fn scripted(k: usize, max: usize) -> (Result<Delivered<i64>, FeedbackError<Offline>>, usize, Vec<Option<String>>) {
        let mut calls = 0;
        let mut seen = Vec::new();
        let r = with_feedback(
            max,
            FEEDBACK_TEMPLATE,
            |fb: Option<&str>| {
                seen.push(fb.map(str::to_string));
                calls += 1;
                Ok::<_, Offline>(if calls <= k { "oops".to_string() } else { "7".to_string() })
            },
            |raw, _| raw.parse::<i64>().map_err(|_| vec![Violation::new(ViolationKind::NotJson, "send a number")]),
        );
        (r, calls, seen)
    }

    #[test]
    fn rounds_and_calls() {
        let (r, calls, seen) = scripted(0, 5);
        assert_eq!((r.unwrap().rounds, calls), (0, 1));
        assert_eq!(seen, [None]);
        let (r, calls, seen) = scripted(2, 5);
        let d = r.unwrap();
        assert_eq!((d.payload, d.rounds, calls, d.attempts.len()), (7, 2, 3, 3));
        assert!(seen[1].as_deref().unwrap().contains("- [NotJson] send a number"));
        let (r, calls, _) = scripted(6, 5);
        match r {
            Err(FeedbackError::Delivery(f)) => assert_eq!(f.history.len(), 6),
            other => panic!("{other:?}"),
        }
        assert_eq!(calls, 6);
        let (r, calls, _) = scripted(1, 0);
        assert!(matches!(r, Err(FeedbackError::Delivery(_))));
        assert_eq!(calls, 1);
    }

    #[test]
    fn backend_errors_stop_the_loop() {
        let r: Result<Delivered<()>, _> =
            with_feedback(5, FEEDBACK_TEMPLATE, |_| Err(Offline), |_, _| Ok(()));
        assert!(matches!(r, Err(FeedbackError::Backend { .. })));
    }
}
