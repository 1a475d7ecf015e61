//! Run logging and artifacts.
//!
//! During a run, events stream to `runs/<run-id>/events.jsonl`. At the end
//! the whole run is written to `runs/<run-id>/artifact.json`, which is
//! enough to rebuild the benchmark report and to re-check the run offline
//! with [`verify_artifact`].

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt_engine::{LeafKind, TickStatus};
use crate::canonical::{to_canonical_json, to_canonical_line};
use crate::case_gen::SimulationCase;
use crate::cbs::{Phase, PhaseRecord, PhaseTranscript, RunResult, SimConfig, SimMode};
use crate::evaluation::{Verdict, VerdictLabel};
use crate::feedback::{Violation, ViolationKind};
use crate::llm_backend::Usage;
use crate::world_state::{diff, StateChange};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStart { run_id: String, tree: String, mode: SimMode },
    CaseGenerated { record: PhaseRecord },
    LeafStart { node_id: String, label: String },
    Phase { node_id: String, record: PhaseRecord },
    LeafEnd { node_id: String, outcome: Option<TickStatus>, changes: Vec<StateChange> },
    Evaluation { record: PhaseRecord },
    RunEnd { status: Option<TickStatus>, delivered: bool, verdict: Option<VerdictLabel> },
}

pub trait EventSink {
    fn emit(&mut self, event: Event);
}

pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _: Event) {}
}

impl EventSink for Vec<Event> {
    fn emit(&mut self, event: Event) {
        self.push(event);
    }
}

/// Appends one `{"seq": n, ...event}` line per event and flushes each line.
/// The first write error is kept and reported by [`JsonlSink::finish`].
pub struct JsonlSink {
    out: BufWriter<File>,
    path: PathBuf,
    seq: u64,
    error: Option<std::io::Error>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| TraceError::Io { path: dir.into(), source })?;
        }
        let file = File::create(path).map_err(|source| TraceError::Io { path: path.into(), source })?;
        Ok(JsonlSink { out: BufWriter::new(file), path: path.into(), seq: 0, error: None })
    }

    pub fn finish(self) -> Result<(), TraceError> {
        match self.error {
            Some(source) => Err(TraceError::Io { path: self.path, source }),
            None => Ok(()),
        }
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, event: Event) {
        if self.error.is_some() {
            return;
        }
        let mut v = serde_json::to_value(&event).expect("event serializes");
        v["seq"] = self.seq.into();
        self.seq += 1;
        let line = to_canonical_line(&v).expect("event serializes");
        let res = self.out.write_all(line.as_bytes()).and_then(|_| self.out.write_all(b"\n")).and_then(|_| self.out.flush());
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.into(), source })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TraceError::Parse { path: path.into(), message: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: u64,
    pub model_latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub run_id: String,
    pub task_id: String,
    pub tree_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<VerdictLabel>,
    pub config: SimConfig,
    /// Present when the case could be loaded or generated.
    pub case: Option<SimulationCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_generation: Option<PhaseRecord>,
    pub run: Option<RunResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<PhaseRecord>,
    pub verdict: Option<Verdict>,
    /// Why the run produced no verdict, if it did not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub usage: Usage,
    pub timing: Timing,
}

impl RunArtifact {
    pub fn delivered(&self) -> bool {
        self.verdict.is_some()
    }

    /// Every phase record in the artifact, in execution order.
    pub fn phase_records(&self) -> Vec<&PhaseRecord> {
        let mut out: Vec<&PhaseRecord> = self.case_generation.iter().collect();
        if let Some(run) = &self.run {
            out.extend(run.transcripts.iter().flat_map(|t| &t.phases));
        }
        out.extend(self.evaluation.iter());
        out
    }

    pub fn total_usage(&self) -> (Usage, u64) {
        let mut usage = Usage::default();
        let mut latency = 0;
        for r in self.phase_records() {
            usage.prompt_tokens += r.usage.prompt_tokens;
            usage.completion_tokens += r.usage.completion_tokens;
            latency += r.latency_ms;
        }
        (usage, latency)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join("runs").join(run_id)
}

pub fn save_artifact(artifact: &RunArtifact, path: &Path) -> Result<(), TraceError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| TraceError::Io { path: dir.into(), source })?;
    }
    let text = to_canonical_json(artifact).expect("artifact serializes");
    std::fs::write(path, text).map_err(|source| TraceError::Io { path: path.into(), source })
}

pub fn load_artifact(path: &Path) -> Result<RunArtifact, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| TraceError::Parse { path: path.into(), message: e.to_string() })
}

fn rule(out: &mut Vec<Violation>, pointer: String, detail: String) {
    out.push(Violation::at(ViolationKind::DomainRule, pointer, detail));
}

/// Phase sequence a transcript must follow, given its conditions and outcome.
fn check_phase_order(tr: &PhaseTranscript, mode: SimMode, ptr: &str, out: &mut Vec<Violation>) {
    let got: Vec<Phase> = tr.phases.iter().map(|p| p.phase).collect();
    if tr.mode != mode {
        rule(out, format!("{ptr}/mode"), format!("transcript mode {} differs from the run's mode {mode}", tr.mode));
    }
    let expected: Vec<Phase> = match mode {
        SimMode::SinglePhase => vec![Phase::SinglePhase],
        SimMode::Cbs => {
            let mut e = vec![Phase::Consider];
            e.extend(std::iter::repeat_n(Phase::Decide, tr.conditions.len()));
            if tr.kind == LeafKind::Action && !tr.has_unmet() && tr.outcome.is_some() {
                e.extend([Phase::Capture, Phase::Transfer]);
            }
            e
        }
    };
    let ok = if tr.outcome.is_some() || mode == SimMode::SinglePhase {
        got == expected
    } else {
        // an undelivered leaf stops at the exchange that failed
        let tails: [&[Phase]; 4] = [&[], &[Phase::Decide], &[Phase::Capture], &[Phase::Capture, Phase::Transfer]];
        got.starts_with(&expected) && tails.contains(&&got[expected.len()..])
    };
    if !ok {
        let show = |v: &[Phase]| v.iter().map(Phase::to_string).collect::<Vec<_>>().join(", ");
        rule(out, format!("{ptr}/phases"), format!("phases [{}] should be [{}]", show(&got), show(&expected)));
    }
    if mode == SimMode::Cbs {
        let decides: Vec<Option<usize>> =
            tr.phases.iter().filter(|p| p.phase == Phase::Decide).map(|p| p.condition).collect();
        if decides.iter().enumerate().any(|(i, c)| *c != Some(i)) {
            rule(out, format!("{ptr}/phases"), "decide records are not numbered 0, 1, ...".into());
        }
    }
    if tr.has_unmet() && tr.plan.is_some() {
        rule(out, format!("{ptr}/plan"), "a leaf with an unmet condition carries a transfer plan".into());
    }
    if tr.kind == LeafKind::Condition && (tr.plan.is_some() || !tr.changes.is_empty()) {
        rule(out, format!("{ptr}/plan"), "a condition leaf changed the state".into());
    }
    let expect_outcome = match (tr.outcome, tr.has_unmet()) {
        (Some(TickStatus::Success), true) | (Some(TickStatus::Failure), false) => false,
        _ => true,
    };
    if !expect_outcome {
        rule(out, format!("{ptr}/outcome"), "outcome disagrees with the condition verdicts".into());
    }
}

/// Re-checks an artifact offline: phase ordering per mode, transfers within
/// the captured set, and that replaying the recorded plans onto the initial
/// scene reproduces every recorded change and the final scene, with no
/// change left unexplained.
pub fn verify_artifact(a: &RunArtifact) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(run) = &a.run else {
        if a.verdict.is_some() {
            rule(&mut out, "/verdict".into(), "verdict without a run".into());
        }
        return out;
    };
    if let Some(case) = &a.case {
        if case.initial_state != *run.initial.state() {
            rule(&mut out, "/run/initial".into(), "initial snapshot differs from the case".into());
        }
    }
    let flow_ids: Vec<&str> = run.action_flow.iter().map(|f| f.node_id.as_str()).collect();
    let tr_ids: Vec<&str> = run.transcripts.iter().map(|t| t.node_id.as_str()).collect();
    let delivered_ids: Vec<&str> =
        run.transcripts.iter().filter(|t| t.outcome.is_some()).map(|t| t.node_id.as_str()).collect();
    if flow_ids != delivered_ids || (run.delivered && flow_ids != tr_ids) {
        rule(&mut out, "/run/transcripts".into(), "transcripts do not match the action flow".into());
    }
    for (f, t) in run.action_flow.iter().zip(run.transcripts.iter().filter(|t| t.outcome.is_some())) {
        if t.outcome != Some(f.status) {
            rule(&mut out, "/run/action_flow".into(), format!("`{}` status differs from its transcript", f.node_id));
        }
    }

    let mut state = run.initial.to_state();
    for (i, tr) in run.transcripts.iter().enumerate() {
        let ptr = format!("/run/transcripts/{i}");
        check_phase_order(tr, a.config.mode, &ptr, &mut out);
        let Some(plan) = &tr.plan else {
            if !tr.changes.is_empty() {
                for c in &tr.changes {
                    rule(&mut out, format!("{ptr}/changes"), format!("orphan state change at `{}`: no plan", c.path));
                }
            }
            continue;
        };
        let captured: BTreeSet<_> = plan.captured_paths.iter().collect();
        for t in &plan.transfers {
            if !captured.contains(&t.path) {
                rule(&mut out, format!("{ptr}/plan"), format!("transfer to `{}` outside the captured set", t.path));
            }
        }
        let written: BTreeSet<String> = plan.transfers.iter().map(|t| t.path.to_string()).collect();
        if written.len() != plan.transfers.len() {
            rule(&mut out, format!("{ptr}/plan"), "a path is written twice".into());
        }
        let before = state.clone();
        if let Err(e) = plan.apply(&mut state) {
            rule(&mut out, format!("{ptr}/plan"), format!("plan does not apply: {e}"));
            continue;
        }
        let replayed = diff(&before, &state);
        if replayed != tr.changes {
            rule(&mut out, format!("{ptr}/changes"), "recorded changes differ from replaying the plan".into());
        }
        for c in &tr.changes {
            if !written.contains(&c.path) {
                rule(&mut out, format!("{ptr}/changes"), format!("orphan state change at `{}`", c.path));
            }
        }
    }
    for c in diff(&state, run.final_state.state()) {
        rule(&mut out, "/run/final".into(), format!("orphan state change at `{}`: not produced by any plan", c.path));
    }

    if let Some(v) = &a.verdict {
        if v.label == VerdictLabel::BadLogic {
            let failed = v.failed_node.as_deref().and_then(|id| run.action_flow.iter().find(|f| f.node_id == id));
            if !failed.is_some_and(|f| f.status == TickStatus::Failure) {
                rule(&mut out, "/verdict/failed_node".into(), "BadLogic must name a node that failed in the run".into());
            }
        }
        if !run.delivered {
            rule(&mut out, "/verdict".into(), "verdict on an undelivered run".into());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_sink_numbers_events() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs/x/events.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        sink.emit(Event::LeafStart { node_id: "a".into(), label: "a".into() });
        sink.emit(Event::RunEnd { status: None, delivered: false, verdict: None });
        sink.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"event":"leaf_start","label":"a","node_id":"a","seq":0}"#);
        assert!(lines[1].contains(r#""seq":1"#));
        assert_eq!(read_events(&path).unwrap().len(), 2);
    }
}
