//! Golden checker corpus: every clean reply is accepted on the first call and
//! every seeded reply draws exactly the expected violation kinds.

mod common;

use std::collections::BTreeSet;
use std::path::Path;

use besim::cbs::{capture, consider, decide, transfer, ConditionSpec, LeafContext, PhaseRecord, SimConfig};
use besim::llm_backend::MockBackend;
use besim::world_state::{StatePath, Value, WorldState};
use serde_json::Value as Json;

use common::fixtures::{repo_root, task};

fn kinds(record: &PhaseRecord) -> BTreeSet<String> {
    record.attempts[0].violations.iter().map(|v| v.kind.to_string()).collect()
}

fn run_entry(entry: &Json, base: &WorldState) -> PhaseRecord {
    let case = task("clean_book");
    let tree = &case.trees[0].1;
    let other = &case.trees[2].1;
    let label = entry["node"].as_str().unwrap();
    let node = tree.find(label).or_else(|| other.find(label)).unwrap_or_else(|| panic!("no leaf {label}"));

    let mut state = base.clone();
    for pair in entry["apply"].as_array().into_iter().flatten() {
        let path: StatePath = pair[0].as_str().unwrap().parse().unwrap();
        let value: Value = serde_json::from_value(pair[1].clone()).unwrap();
        state.set(&path, value).unwrap();
    }
    let reply = match &entry["response"] {
        Json::String(s) => s.clone(),
        other => other.to_string(),
    };
    // One repeat so a rejected reply still leaves a full record behind.
    let backend = MockBackend::from_queue(vec![reply.clone(), reply]);
    let config = SimConfig { max_feedback: 1, ..SimConfig::default() };
    let ctx = LeafContext { task: &case.task, backend: &backend, config: &config };
    match entry["phase"].as_str().unwrap() {
        "consider" => consider(node, &state, &ctx).0,
        "decide" => {
            let spec: ConditionSpec = serde_json::from_value(entry["condition"].clone()).unwrap();
            decide(node, 0, &spec, &state, &ctx).0
        }
        "capture" => capture(node, &state, &ctx).0,
        "transfer" => {
            let captured: Vec<StatePath> =
                entry["captured"].as_array().unwrap().iter().map(|p| p.as_str().unwrap().parse().unwrap()).collect();
            transfer(node, &captured, &state, &ctx).0
        }
        other => panic!("unknown phase {other}"),
    }
}

fn corpus(sub: &str) -> Vec<(String, Json)> {
    let dir = repo_root().join("fixtures/checker").join(sub);
    let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.iter().map(|p| (name(p), serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())).collect()
}

fn name(p: &Path) -> String {
    p.file_stem().unwrap().to_string_lossy().into_owned()
}

#[test]
fn clean_replies_pass() {
    let base = task("clean_book").case.unwrap().initial_state;
    let entries = corpus("clean");
    assert!(entries.len() >= 5);
    for (name, entry) in entries {
        let record = run_entry(&entry, &base);
        assert_eq!(record.rounds, 0, "{name}: {:?}", record.attempts[0].violations);
        assert!(record.payload.is_some(), "{name}");
    }
}

#[test]
fn seeded_violations_are_detected() {
    let base = task("clean_book").case.unwrap().initial_state;
    let entries = corpus("seeded");
    assert!(entries.len() >= 10);
    for (name, entry) in entries {
        let record = run_entry(&entry, &base);
        let want: BTreeSet<String> =
            entry["expect"].as_array().unwrap().iter().map(|k| k.as_str().unwrap().to_string()).collect();
        assert_eq!(kinds(&record), want, "{name}: {:?}", record.attempts[0].violations);
        assert!(record.attempts[0].violations.iter().all(|v| !v.detail.is_empty()), "{name}");
    }
}
