//! Shipped benchmark fixtures and checks over their runs.

use std::path::PathBuf;

use besim::bench::{load_task, run_one, BenchCase};
use besim::cbs::{RunResult, SimConfig};
use besim::evaluation::VerdictLabel;
use besim::llm_backend::MockBackend;
use besim::tracing::{NullSink, RunArtifact};
use besim::world_state::diff;

pub const TASKS: [&str; 5] = ["clean_book", "put_toy_on_bed", "set_table", "throw_away_trash", "water_plant"];

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn bench_dir() -> PathBuf {
    repo_root().join("fixtures/bench")
}

pub fn task(id: &str) -> BenchCase {
    load_task(&bench_dir().join("tasks").join(id)).unwrap_or_else(|e| panic!("{id}: {e}"))
}

/// Runs one tree of a task against its scripted mock.
pub fn mock_run(case: &BenchCase, label: VerdictLabel, config: &SimConfig) -> RunArtifact {
    let mock = MockBackend::load(case.mock.as_ref().expect("task ships mock.json")).unwrap();
    let tree = &case.trees.iter().find(|(l, _)| *l == label).unwrap().1;
    let run_id = format!("{}__{}", case.id, label.as_str());
    run_one(&run_id, &case.id, &case.task, tree, case.case.as_ref(), Some(label), &mock, config, &mut NullSink)
}

/// Replays every recorded plan onto the initial snapshot, in flow order.
///
/// Each step's slot diff must equal the changes recorded for that leaf and
/// touch only paths its own plan wrote, so every change has exactly one
/// owner. The replayed state must equal the final snapshot.
pub fn check_hygiene(run: &RunResult) -> Result<usize, String> {
    let mut state = run.initial.state().clone();
    let mut attributed = 0;
    for tr in &run.transcripts {
        let before = state.clone();
        if let Some(plan) = &tr.plan {
            plan.apply(&mut state).map_err(|e| format!("{}: plan does not apply: {e}", tr.node_id))?;
        }
        let step = diff(&before, &state);
        if step != tr.changes {
            return Err(format!("{}: recorded changes differ from the replayed diff", tr.node_id));
        }
        for change in &step {
            let owned = tr.plan.as_ref().is_some_and(|p| p.transfers.iter().any(|t| t.path.to_string() == change.path));
            if !owned {
                return Err(format!("{}: change to {} is not written by its plan", tr.node_id, change.path));
            }
            attributed += 1;
        }
    }
    if state != *run.final_state.state() {
        let left = diff(&state, &run.final_state);
        return Err(format!("replayed state differs from the final snapshot at {} slot(s)", left.len()));
    }
    Ok(attributed)
}
