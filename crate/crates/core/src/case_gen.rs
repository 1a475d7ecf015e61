//! Simulation cases: the initial scene plus the goal, generated by the model
//! from a task description and the tree, or loaded from disk.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::bt_engine::BehaviorTree;
use crate::canonical::to_canonical_json;
use crate::cbs::{fill, schemas, Exchange, Phase, PhaseRecord, SimConfig};
use crate::feedback::{parse_checked, FeedbackError, Violation, ViolationKind};
use crate::llm_backend::{Backend, BackendError};
use crate::world_state::{EntityClass, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGoal {
    pub task_description: String,
    /// Natural-language conditions on the final scene.
    pub goal_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCase {
    pub goal: TaskGoal,
    pub initial_state: WorldState,
}

/// Entity fields every case must spell out.
pub const REQUIRED_FIELDS: [&str; 4] = ["entity_class", "type", "position", "size"];

/// Words in node descriptions that make a robot property mandatory.
const TASK_PROPERTIES: [(&[&str], &str); 1] = [(&["grasp", "pick", "grip", "hold"], "gripper_contact_range")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CaseIssue {
    MissingField { entity: String, field: String },
    MissingTaskProperty { property: String, trigger: String },
    EmptyGoal { detail: String },
    InvalidState { detail: String },
    UnknownLeafEntity { label: String },
}

impl fmt::Display for CaseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseIssue::MissingField { entity, field } => write!(f, "entity `{entity}` is missing `{field}`"),
            CaseIssue::MissingTaskProperty { property, trigger } => {
                write!(f, "the task involves `{trigger}` but no robot has a `{property}` property")
            }
            CaseIssue::EmptyGoal { detail } => write!(f, "goal: {detail}"),
            CaseIssue::InvalidState { detail } => write!(f, "initial_state: {detail}"),
            CaseIssue::UnknownLeafEntity { label } => {
                write!(f, "node `{label}` does not name any entity id or type in the scene")
            }
        }
    }
}

impl CaseIssue {
    pub fn to_violation(&self) -> Violation {
        match self {
            CaseIssue::MissingField { entity, .. } => {
                Violation::at(ViolationKind::MissingKey, format!("/initial_state/entities/{entity}"), self.to_string())
            }
            CaseIssue::EmptyGoal { .. } => Violation::at(ViolationKind::DomainRule, "/goal", self.to_string()),
            _ => Violation::at(ViolationKind::DomainRule, "/initial_state", self.to_string()),
        }
    }
}

fn normalize(s: &str) -> String {
    s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

/// Checks a case document in its JSON form, so that missing fields are
/// reported by name rather than as a parse error.
pub fn validate_case_json(doc: &Json, tree: Option<&BehaviorTree>) -> Vec<CaseIssue> {
    let mut out = Vec::new();
    let goal = doc.get("goal");
    let desc = goal.and_then(|g| g.get("task_description")).and_then(Json::as_str).unwrap_or("");
    if desc.trim().is_empty() {
        out.push(CaseIssue::EmptyGoal { detail: "task_description is empty".into() });
    }
    let conditions = goal.and_then(|g| g.get("goal_conditions")).and_then(Json::as_array);
    match conditions {
        Some(c) if !c.is_empty() && c.iter().all(|x| x.as_str().is_some_and(|s| !s.trim().is_empty())) => {}
        _ => out.push(CaseIssue::EmptyGoal { detail: "needs at least one non-empty goal condition".into() }),
    }
    let Some(state_doc) = doc.get("initial_state") else {
        out.push(CaseIssue::InvalidState { detail: "missing".into() });
        return out;
    };
    let mut missing = false;
    if let Some(entities) = state_doc.get("entities").and_then(Json::as_object) {
        for (id, e) in entities {
            for field in REQUIRED_FIELDS {
                if e.get(field).is_none() {
                    missing = true;
                    out.push(CaseIssue::MissingField { entity: id.clone(), field: field.into() });
                }
            }
        }
    }
    if missing {
        return out;
    }
    match serde_json::from_value::<WorldState>(state_doc.clone()) {
        Ok(state) => out.extend(scene_issues(&state, desc, tree)),
        Err(e) => out.push(CaseIssue::InvalidState { detail: e.to_string() }),
    }
    out
}

pub fn validate_case(case: &SimulationCase, tree: Option<&BehaviorTree>) -> Vec<CaseIssue> {
    let doc = serde_json::to_value(case).expect("case serializes");
    validate_case_json(&doc, tree)
}

fn scene_issues(state: &WorldState, task: &str, tree: Option<&BehaviorTree>) -> Vec<CaseIssue> {
    let mut out = Vec::new();
    let mut text = task.to_lowercase();
    if let Some(tree) = tree {
        for leaf in tree.leaves() {
            text.push(' ');
            text.push_str(&leaf.label.to_lowercase());
            text.push(' ');
            text.push_str(&leaf.description.to_lowercase());
        }
    }
    for (triggers, property) in TASK_PROPERTIES {
        let Some(trigger) = triggers.iter().find(|t| text.contains(*t)) else { continue };
        let present = state
            .entities()
            .any(|(_, e)| e.entity_class == EntityClass::Robot && e.properties.contains_key(property));
        if !present {
            out.push(CaseIssue::MissingTaskProperty { property: property.into(), trigger: trigger.to_string() });
        }
    }
    if let Some(tree) = tree {
        let names: BTreeSet<String> =
            state.entities().flat_map(|(id, e)| [normalize(id), normalize(&e.kind)]).filter(|n| !n.is_empty()).collect();
        let mut seen = BTreeSet::new();
        for leaf in tree.leaves() {
            let label = normalize(&leaf.label);
            if seen.insert(label.clone()) && !names.iter().any(|n| label.contains(n.as_str())) {
                out.push(CaseIssue::UnknownLeafEntity { label: leaf.label.clone() });
            }
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub fn load_case(path: &Path) -> Result<SimulationCase, CaseError> {
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| CaseError::Parse { path: path.into(), message: e.to_string() })
}

pub fn save_case(case: &SimulationCase, path: &Path) -> Result<(), CaseError> {
    let text = to_canonical_json(case).expect("case serializes");
    std::fs::write(path, text).map_err(|source| CaseError::Io { path: path.into(), source })
}

/// Asks the model for a case, repairing it through feedback until it
/// validates against the case schema and [`validate_case_json`].
pub fn generate_case(
    task: &str,
    tree: &BehaviorTree,
    backend: &dyn Backend,
    config: &SimConfig,
) -> (PhaseRecord, Result<SimulationCase, FeedbackError<BackendError>>) {
    let schema = &schemas().case;
    let prompt = fill(
        &config.templates.case_generation,
        &[
            ("task", task),
            ("tree_xml", &tree.to_xml()),
            ("schema", &serde_json::to_string_pretty(schema.document()).expect("schema serializes")),
        ],
    );
    let exchange = Exchange { backend, config };
    exchange.run(Phase::CaseGeneration, None, prompt, |raw, _| {
        let payload = parse_checked(raw, schema)?;
        let issues = validate_case_json(&payload, Some(tree));
        if !issues.is_empty() {
            return Err(issues.iter().map(CaseIssue::to_violation).collect());
        }
        let case: SimulationCase = serde_json::from_value(payload.clone())
            .map_err(|e| vec![Violation::new(ViolationKind::WrongType, e.to_string())])?;
        Ok((case, payload))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bt_engine::parse_bt;
    use crate::llm_backend::MockBackend;
    use serde_json::json;

    fn tree() -> BehaviorTree {
        parse_bt(
            r#"<bt name="clean_book">
  <desc label="hold_rag_in_gripper?">Is the rag held in the gripper?</desc>
  <desc label="pick_up_rag">Grasp the rag with the gripper.</desc>
  <desc label="clean_book">Wipe the book with the rag.</desc>
  <sequence id="root">
    <fallback id="get_rag">
      <condition id="has_rag" label="hold_rag_in_gripper?"/>
      <action id="pick_up_rag" label="pick_up_rag"/>
    </fallback>
    <action id="clean_book" label="clean_book"/>
  </sequence>
</bt>"#,
        )
        .unwrap()
    }

    fn case_json() -> Json {
        json!({
            "goal": {"task_description": "Clean book", "goal_conditions": ["the book is clean"]},
            "initial_state": {
                "entities": {
                    "robot": {"entity_class": "robot", "type": "robot", "position": [0, 0, 0], "size": 0.5,
                              "properties": {"gripper_contact_range": {"value": 0.8, "unit": "m"}}},
                    "book": {"entity_class": "object", "type": "book", "position": [0.5, 0, 0.7], "size": 0.25,
                             "properties": {"is_clean": false}},
                    "rag": {"entity_class": "object", "type": "rag", "position": [0.4, 0.2, 0.7], "size": 0.15}
                },
                "relationships": [],
                "environment": {}
            }
        })
    }

    #[test]
    fn valid_case_has_no_issues() {
        assert_eq!(validate_case_json(&case_json(), Some(&tree())), vec![]);
    }

    #[test]
    fn missing_size_is_reported_by_name() {
        let mut doc = case_json();
        doc["initial_state"]["entities"]["rag"].as_object_mut().unwrap().remove("size");
        assert_eq!(
            validate_case_json(&doc, None),
            vec![CaseIssue::MissingField { entity: "rag".into(), field: "size".into() }]
        );
    }

    #[test]
    fn grasping_requires_gripper_range() {
        let mut doc = case_json();
        doc["initial_state"]["entities"]["robot"]["properties"] = json!({});
        let issues = validate_case_json(&doc, Some(&tree()));
        assert!(matches!(&issues[..], [CaseIssue::MissingTaskProperty { property, .. }] if property == "gripper_contact_range"));
    }

    #[test]
    fn leaves_must_name_an_entity() {
        let mut doc = case_json();
        doc["initial_state"]["entities"].as_object_mut().unwrap().remove("rag");
        let issues = validate_case_json(&doc, Some(&tree()));
        let labels: Vec<String> = issues
            .iter()
            .filter_map(|i| match i {
                CaseIssue::UnknownLeafEntity { label } => Some(label.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(labels, ["hold_rag_in_gripper?", "pick_up_rag"]);
    }

    #[test]
    fn generation_repairs_non_json_once() {
        let mock = MockBackend::from_queue(["here you go", &case_json().to_string()]);
        let (rec, case) = generate_case("Clean book", &tree(), &mock, &SimConfig::default());
        let case = case.unwrap();
        assert_eq!(rec.rounds, 1);
        assert_eq!(rec.attempts[0].violations[0].kind, ViolationKind::NotJson);
        assert_eq!(case.initial_state.entities().count(), 3);
        assert!(rec.prompt.contains("<condition id=\"has_rag\""));
    }

    #[test]
    fn generation_gives_up_after_six_bad_replies() {
        let mock = MockBackend::from_queue(vec!["nope"; 6]);
        let (rec, case) = generate_case("Clean book", &tree(), &mock, &SimConfig::default());
        assert!(matches!(case, Err(FeedbackError::Delivery(_))));
        assert_eq!(rec.attempts.len(), 6);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let case: SimulationCase = serde_json::from_value(case_json()).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_case(&case, &a).unwrap();
        save_case(&load_case(&a).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let text = std::fs::read_to_string(&a).unwrap();
        std::fs::write(&a, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_case(&a), Err(CaseError::Parse { .. })));
    }
}
