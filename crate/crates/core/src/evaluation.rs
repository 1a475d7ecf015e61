//! Verdicts: Good, BadLogic or Unreachable, derived from the goal, the
//! initial and final scenes and the action flow.
//!
//! The model judges only whether each goal condition holds in the final
//! scene. The split between BadLogic and Unreachable is read off the
//! transcripts: a run fails with bad logic when some executed action found a
//! real-world precondition unmet.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::bt_engine::LeafKind;
use crate::case_gen::TaskGoal;
use crate::cbs::{fill, schemas, Exchange, Phase, PhaseRecord, RunResult, SimConfig};
use crate::feedback::{check_semantics, parse_checked, FeedbackError, Violation, ViolationKind};
use crate::llm_backend::{Backend, BackendError};
use crate::world_state::{diff, render_changes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Good,
    BadLogic,
    Unreachable,
}

impl VerdictLabel {
    pub const ALL: [VerdictLabel; 3] = [VerdictLabel::Good, VerdictLabel::BadLogic, VerdictLabel::Unreachable];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictLabel::Good => "good",
            VerdictLabel::BadLogic => "bad_logic",
            VerdictLabel::Unreachable => "unreachable",
        }
    }
}

impl fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictLabel::Good => "Good",
            VerdictLabel::BadLogic => "BadLogic",
            VerdictLabel::Unreachable => "Unreachable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown label `{0}` (expected good, bad_logic or unreachable)")]
pub struct UnknownLabel(pub String);

/// Parses a benchmark label, ignoring case and `_`/`-`/space separators.
pub fn classify_expected(label: &str) -> Result<VerdictLabel, UnknownLabel> {
    let key: String = label.chars().filter(|c| !matches!(c, '_' | '-' | ' ')).flat_map(char::to_lowercase).collect();
    match key.as_str() {
        "good" => Ok(VerdictLabel::Good),
        "badlogic" => Ok(VerdictLabel::BadLogic),
        "unreachable" => Ok(VerdictLabel::Unreachable),
        _ => Err(UnknownLabel(label.to_string())),
    }
}

impl FromStr for VerdictLabel {
    type Err = UnknownLabel;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        classify_expected(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalResult {
    pub condition: String,
    pub satisfied: bool,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    pub rationale: String,
    /// The action blamed for a BadLogic verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_node: Option<String>,
    pub goal_results: Vec<GoalResult>,
}

/// First action in flow order whose decide phase found a condition unmet.
pub fn first_reality_failure(run: &RunResult) -> Option<&str> {
    run.action_flow.iter().filter(|f| f.kind == LeafKind::Action).find_map(|f| {
        run.transcripts
            .iter()
            .find(|t| t.node_id == f.node_id)
            .filter(|t| t.has_unmet())
            .map(|t| t.node_id.as_str())
    })
}

/// The decision procedure once goal results are known.
pub fn classify(goal_results: &[GoalResult], run: &RunResult) -> (VerdictLabel, Option<String>) {
    if goal_results.iter().all(|g| g.satisfied) {
        return (VerdictLabel::Good, None);
    }
    match first_reality_failure(run) {
        Some(node) => (VerdictLabel::BadLogic, Some(node.to_string())),
        None => (VerdictLabel::Unreachable, None),
    }
}

fn same_text(a: &str, b: &str) -> bool {
    a.split_whitespace().eq(b.split_whitespace())
}

fn read_goal_results(payload: &Json, goal: &TaskGoal, out: &mut Vec<Violation>) -> Vec<GoalResult> {
    let items = payload["goal_results"].as_array().cloned().unwrap_or_default();
    if items.len() != goal.goal_conditions.len() {
        out.push(Violation::at(
            ViolationKind::DomainRule,
            "/goal_results",
            format!("expected one entry per goal condition ({}), found {}", goal.goal_conditions.len(), items.len()),
        ));
    }
    let mut results = Vec::new();
    for (i, (item, cond)) in items.iter().zip(&goal.goal_conditions).enumerate() {
        let text = item["condition"].as_str().unwrap_or("");
        if !same_text(text, cond) {
            out.push(Violation::at(
                ViolationKind::DomainRule,
                format!("/goal_results/{i}/condition"),
                format!("entry {i} must restate the goal condition \"{cond}\""),
            ));
        }
        results.push(GoalResult {
            condition: cond.clone(),
            satisfied: item["satisfied"].as_bool().unwrap_or(false),
            reasoning: item["reasoning"].as_str().unwrap_or("").to_string(),
        });
    }
    results
}

/// Judges the goal against a delivered run and derives the verdict.
pub fn evaluate(
    goal: &TaskGoal,
    run: &RunResult,
    backend: &dyn Backend,
    config: &SimConfig,
) -> (PhaseRecord, Result<Verdict, FeedbackError<BackendError>>) {
    let schema = &schemas().evaluate;
    let conditions: String = goal.goal_conditions.iter().map(|c| format!("- {c}\n")).collect();
    let flow: String = run
        .action_flow
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let kind = if f.kind == LeafKind::Action { "action" } else { "condition" };
            format!("{}. {} ({kind}) -> {}\n", i + 1, f.label, f.status)
        })
        .collect();
    let changes = render_changes(&diff(&run.initial, &run.final_state));
    let changes = if changes.is_empty() { "(none)\n".to_string() } else { changes };
    let prompt = fill(
        &config.templates.evaluate,
        &[
            ("header", "### phase: evaluate"),
            ("task", &goal.task_description),
            ("goal_conditions", &conditions),
            ("initial_state", &run.initial.render_slots()),
            ("final_state", &run.final_state.render_slots()),
            ("changes", &changes),
            ("action_flow", &flow),
            ("schema", &serde_json::to_string_pretty(schema.document()).expect("schema serializes")),
        ],
    );
    let exchange = Exchange { backend, config };
    exchange.run(Phase::Evaluate, None, prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let mut v = check_semantics(&payload, &[]);
        let goal_results = read_goal_results(&payload, goal, &mut v);
        if !v.is_empty() {
            return Err(v);
        }
        let (label, failed_node) = classify(&goal_results, run);
        let rationale = payload["rationale"].as_str().unwrap_or("").to_string();
        Ok((Verdict { label, rationale, failed_node, goal_results }, payload))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt_engine::{FlowEntry, TickStatus};
    use crate::cbs::{ConditionSpec, ConditionVerdict, DecideMode, PhaseTranscript, SimMode};
    use crate::world_state::WorldState;

    #[test]
    fn labels_parse_case_insensitively() {
        assert_eq!(classify_expected("Good"), Ok(VerdictLabel::Good));
        assert_eq!(classify_expected("bad_logic"), Ok(VerdictLabel::BadLogic));
        assert_eq!(classify_expected("UNREACHABLE"), Ok(VerdictLabel::Unreachable));
        assert_eq!(classify_expected("meh"), Err(UnknownLabel("meh".into())));
    }

    fn leaf(id: &str, kind: LeafKind, status: TickStatus, unmet: bool) -> (FlowEntry, PhaseTranscript) {
        let flow = FlowEntry { node_id: id.into(), label: id.into(), kind, status };
        let verdict = ConditionVerdict {
            spec: ConditionSpec { statement: "x".into(), crucial_states: vec![] },
            met: !unmet,
            mode: DecideMode::Semantic,
            rationale: String::new(),
            program: None,
        };
        let tr = PhaseTranscript {
            node_id: id.into(),
            label: id.into(),
            kind,
            mode: SimMode::Cbs,
            phases: vec![],
            conditions: vec![verdict],
            plan: None,
            changes: vec![],
            outcome: Some(status),
        };
        (flow, tr)
    }

    fn run(leaves: Vec<(FlowEntry, PhaseTranscript)>) -> RunResult {
        let s = WorldState::new().snapshot();
        let (action_flow, transcripts) = leaves.into_iter().unzip();
        RunResult {
            status: Some(TickStatus::Failure),
            action_flow,
            initial: s.clone(),
            final_state: s,
            transcripts,
            delivered: true,
            error: None,
        }
    }

    fn unmet_goal() -> Vec<GoalResult> {
        vec![GoalResult { condition: "g".into(), satisfied: false, reasoning: String::new() }]
    }

    #[test]
    fn earliest_failed_action_is_blamed() {
        let r = run(vec![
            leaf("has_rag", LeafKind::Condition, TickStatus::Failure, true),
            leaf("pick", LeafKind::Action, TickStatus::Failure, true),
            leaf("clean", LeafKind::Action, TickStatus::Failure, true),
        ]);
        assert_eq!(classify(&unmet_goal(), &r), (VerdictLabel::BadLogic, Some("pick".into())));
    }

    #[test]
    fn failed_conditions_alone_mean_unreachable() {
        let r = run(vec![
            leaf("has_rag", LeafKind::Condition, TickStatus::Failure, true),
            leaf("pick", LeafKind::Action, TickStatus::Success, false),
        ]);
        assert_eq!(classify(&unmet_goal(), &r), (VerdictLabel::Unreachable, None));
    }

    #[test]
    fn satisfied_goal_is_good_regardless_of_failures() {
        let r = run(vec![leaf("pick", LeafKind::Action, TickStatus::Failure, true)]);
        let met = vec![GoalResult { condition: "g".into(), satisfied: true, reasoning: String::new() }];
        assert_eq!(classify(&met, &r), (VerdictLabel::Good, None));
    }
}
