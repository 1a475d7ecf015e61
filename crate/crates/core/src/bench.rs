//! Benchmark harness: task triples on disk, per-run artifacts, and the
//! Delivery / Accuracy report.
//!
//! ```text
//! tasks/<id>/task.txt          task description
//! tasks/<id>/good.xml          tree expected to be judged Good
//! tasks/<id>/bad_logic.xml     tree expected to be judged BadLogic
//! tasks/<id>/unreachable.xml   tree expected to be judged Unreachable
//! tasks/<id>/case.json         optional pre-generated simulation case
//! tasks/<id>/mock.json         optional scripted backend for offline runs
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bt_engine::{parse_bt, BehaviorTree};
use crate::canonical::to_canonical_json;
use crate::case_gen::{generate_case, load_case, SimulationCase};
use crate::cbs::{simulate_run, SimConfig};
use crate::evaluation::{evaluate, VerdictLabel};
use crate::llm_backend::{Backend, BackendError};
use crate::tracing::{load_artifact, run_dir, save_artifact, Event, EventSink, JsonlSink, RunArtifact, Timing};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark layout: {0}")]
    Layout(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct BenchCase {
    pub id: String,
    pub dir: PathBuf,
    pub task: String,
    /// Trees in label order: good, bad_logic, unreachable.
    pub trees: Vec<(VerdictLabel, BehaviorTree)>,
    pub case: Option<SimulationCase>,
    pub mock: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, BenchError> {
    std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.into(), source })
}

/// Loads every task directory under `dir/tasks` (or `dir` itself when it
/// has no `tasks` subdirectory), sorted by id.
pub fn load_benchmark(dir: &Path) -> Result<Vec<BenchCase>, BenchError> {
    if !dir.is_dir() {
        return Err(BenchError::Layout(format!("{} is not a directory", dir.display())));
    }
    let root = if dir.join("tasks").is_dir() { dir.join("tasks") } else { dir.to_path_buf() };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|source| BenchError::Io { path: root.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_task(d)).collect()
}

pub fn load_task(dir: &Path) -> Result<BenchCase, BenchError> {
    let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let need = |name: &str| {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(BenchError::Layout(format!("task `{id}` has no {name}")))
        }
    };
    let task = read(&need("task.txt")?)?.trim().to_string();
    let mut trees = Vec::new();
    for label in VerdictLabel::ALL {
        let path = need(&format!("{}.xml", label.as_str()))?;
        let tree = parse_bt(&read(&path)?).map_err(|e| BenchError::Parse { path: path.clone(), message: e.to_string() })?;
        trees.push((label, tree));
    }
    let case_path = dir.join("case.json");
    let case = if case_path.is_file() {
        Some(load_case(&case_path).map_err(|e| BenchError::Parse { path: case_path, message: e.to_string() })?)
    } else {
        None
    };
    let mock = Some(dir.join("mock.json")).filter(|p| p.is_file());
    Ok(BenchCase { id, dir: dir.to_path_buf(), task, trees, case, mock })
}

/// One simulation of one tree, from case to verdict. Never fails: problems
/// end up in the artifact's `failure` field.
#[allow(clippy::too_many_arguments)]
pub fn run_one(
    run_id: &str,
    task_id: &str,
    task: &str,
    tree: &BehaviorTree,
    case: Option<&SimulationCase>,
    expected: Option<VerdictLabel>,
    backend: &dyn Backend,
    config: &SimConfig,
    sink: &mut dyn EventSink,
) -> RunArtifact {
    let start = Instant::now();
    sink.emit(Event::RunStart { run_id: run_id.into(), tree: tree.name.clone(), mode: config.mode });
    let mut artifact = RunArtifact {
        run_id: run_id.into(),
        task_id: task_id.into(),
        tree_name: tree.name.clone(),
        expected,
        config: config.clone(),
        case: case.cloned(),
        case_generation: None,
        run: None,
        evaluation: None,
        verdict: None,
        failure: None,
        usage: Default::default(),
        timing: Timing::default(),
    };
    if artifact.case.is_none() {
        let (record, generated) = generate_case(task, tree, backend, config);
        sink.emit(Event::CaseGenerated { record: record.clone() });
        artifact.case_generation = Some(record);
        match generated {
            Ok(c) => artifact.case = Some(c),
            Err(e) => artifact.failure = Some(format!("case generation: {e}")),
        }
    }
    if let Some(case) = artifact.case.clone() {
        let run = simulate_run(&case, tree, backend, config, sink);
        if let Some(e) = &run.error {
            artifact.failure = Some(e.to_string());
        } else {
            let (record, verdict) = evaluate(&case.goal, &run, backend, config);
            sink.emit(Event::Evaluation { record: record.clone() });
            artifact.evaluation = Some(record);
            match verdict {
                Ok(v) => artifact.verdict = Some(v),
                Err(e) => artifact.failure = Some(format!("evaluation: {e}")),
            }
        }
        artifact.run = Some(run);
    }
    let (usage, latency) = artifact.total_usage();
    artifact.usage = usage;
    artifact.timing = Timing { wall_ms: start.elapsed().as_millis() as u64, model_latency_ms: latency };
    sink.emit(Event::RunEnd {
        status: artifact.run.as_ref().and_then(|r| r.status),
        delivered: artifact.delivered(),
        verdict: artifact.verdict.as_ref().map(|v| v.label),
    });
    artifact
}

/// Produces the backend for one run.
pub type BackendFactory<'a> = dyn Fn(&BenchCase, VerdictLabel) -> Result<Arc<dyn Backend>, BackendError> + Sync + 'a;

/// Runs every tree of every case on up to `workers` threads, writing
/// `runs/<task>__<label>/{events.jsonl,artifact.json}` and `report.json`
/// under `out`.
pub fn run_benchmark(
    cases: &[BenchCase],
    backends: &BackendFactory<'_>,
    config: &SimConfig,
    out: &Path,
    workers: usize,
) -> Result<MetricsReport, BenchError> {
    let jobs: Vec<(&BenchCase, VerdictLabel, &BehaviorTree)> =
        cases.iter().flat_map(|c| c.trees.iter().map(move |(l, t)| (c, *l, t))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BenchError::Layout(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunArtifact, BenchError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(case, label, tree)| {
                let run_id = format!("{}__{}", case.id, label.as_str());
                let dir = run_dir(out, &run_id);
                let io = |e: crate::tracing::TraceError| BenchError::Layout(e.to_string());
                let mut sink = JsonlSink::create(&dir.join("events.jsonl")).map_err(io)?;
                let artifact = match backends(case, *label) {
                    Ok(backend) => run_one(
                        &run_id,
                        &case.id,
                        &case.task,
                        tree,
                        case.case.as_ref(),
                        Some(*label),
                        backend.as_ref(),
                        config,
                        &mut sink,
                    ),
                    Err(e) => failed_artifact(&run_id, case, *label, tree, config, e.to_string()),
                };
                sink.finish().map_err(io)?;
                save_artifact(&artifact, &dir.join("artifact.json")).map_err(io)?;
                Ok(artifact)
            })
            .collect()
    });
    let artifacts = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = compute_metrics(&rows_from(&artifacts));
    write_report(&report, out)?;
    Ok(report)
}

fn failed_artifact(
    run_id: &str,
    case: &BenchCase,
    label: VerdictLabel,
    tree: &BehaviorTree,
    config: &SimConfig,
    failure: String,
) -> RunArtifact {
    RunArtifact {
        run_id: run_id.into(),
        task_id: case.id.clone(),
        tree_name: tree.name.clone(),
        expected: Some(label),
        config: config.clone(),
        case: case.case.clone(),
        case_generation: None,
        run: None,
        evaluation: None,
        verdict: None,
        failure: Some(failure),
        usage: Default::default(),
        timing: Timing::default(),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub run_id: String,
    pub task_id: String,
    pub expected: VerdictLabel,
    pub predicted: Option<VerdictLabel>,
    pub delivered: bool,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_node: Option<String>,
}

impl CaseRow {
    pub fn new(run_id: &str, expected: VerdictLabel, predicted: Option<VerdictLabel>) -> Self {
        CaseRow {
            run_id: run_id.into(),
            task_id: run_id.split("__").next().unwrap_or(run_id).into(),
            expected,
            predicted,
            delivered: predicted.is_some(),
            correct: predicted == Some(expected),
            failed_node: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub delivered: usize,
    /// Percent of runs that produced a verdict.
    pub delivery_rate: f64,
    /// Percent correct per expected label; undelivered runs count as wrong.
    pub accuracy: BTreeMap<VerdictLabel, CategoryScore>,
    /// Mean of the category accuracies present.
    pub mean_accuracy: f64,
    pub rows: Vec<CaseRow>,
}

fn percent(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

pub fn compute_metrics(rows: &[CaseRow]) -> MetricsReport {
    let delivered = rows.iter().filter(|r| r.delivered).count();
    let mut accuracy = BTreeMap::new();
    for label in VerdictLabel::ALL {
        let of: Vec<&CaseRow> = rows.iter().filter(|r| r.expected == label).collect();
        if of.is_empty() {
            continue;
        }
        let correct = of.iter().filter(|r| r.correct).count();
        accuracy.insert(label, CategoryScore { correct, total: of.len(), accuracy: percent(correct, of.len()) });
    }
    let mean_accuracy = if accuracy.is_empty() {
        0.0
    } else {
        accuracy.values().map(|c| c.accuracy).sum::<f64>() / accuracy.len() as f64
    };
    MetricsReport {
        runs: rows.len(),
        delivered,
        delivery_rate: percent(delivered, rows.len()),
        accuracy,
        mean_accuracy,
        rows: rows.to_vec(),
    }
}

/// Rows for every artifact that carries an expected label, sorted by run id.
pub fn rows_from(artifacts: &[RunArtifact]) -> Vec<CaseRow> {
    let mut rows: Vec<CaseRow> = artifacts
        .iter()
        .filter_map(|a| {
            let expected = a.expected?;
            let mut row = CaseRow::new(&a.run_id, expected, a.verdict.as_ref().map(|v| v.label));
            row.task_id = a.task_id.clone();
            row.failed_node = a.verdict.as_ref().and_then(|v| v.failed_node.clone());
            Some(row)
        })
        .collect();
    rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    rows
}

/// Plain-text table with the columns Delivery, Good, Bad Logic, Unreachable, Mean.
pub fn render_table(report: &MetricsReport, name: &str) -> String {
    let cell = |l: VerdictLabel| report.accuracy.get(&l).map_or("-".to_string(), |c| format!("{:.1}", c.accuracy));
    let width = name.len().max(6);
    let mut s = format!(
        "{:<width$}  {:>8}  {:>6}  {:>9}  {:>11}  {:>6}\n",
        "Method", "Delivery", "Good", "Bad Logic", "Unreachable", "Mean"
    );
    s.push_str(&format!(
        "{:<width$}  {:>8.1}  {:>6}  {:>9}  {:>11}  {:>6.1}\n",
        name,
        report.delivery_rate,
        cell(VerdictLabel::Good),
        cell(VerdictLabel::BadLogic),
        cell(VerdictLabel::Unreachable),
        report.mean_accuracy
    ));
    s
}

pub fn write_report(report: &MetricsReport, out: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(out).map_err(|source| BenchError::Io { path: out.into(), source })?;
    let path = out.join("report.json");
    let text = to_canonical_json(report).expect("report serializes");
    std::fs::write(&path, text).map_err(|source| BenchError::Io { path, source })
}

/// Rebuilds the report from `out/runs/*/artifact.json` alone and rewrites
/// `out/report.json`.
pub fn report(out: &Path) -> Result<MetricsReport, BenchError> {
    let runs = out.join("runs");
    if !runs.is_dir() {
        return Err(BenchError::Layout(format!("{} has no runs directory", out.display())));
    }
    let mut artifacts = Vec::new();
    for entry in std::fs::read_dir(&runs).map_err(|source| BenchError::Io { path: runs.clone(), source })? {
        let path = entry.map_err(|source| BenchError::Io { path: runs.clone(), source })?.path().join("artifact.json");
        if path.is_file() {
            artifacts.push(load_artifact(&path).map_err(|e| BenchError::Parse { path, message: e.to_string() })?);
        }
    }
    let report = compute_metrics(&rows_from(&artifacts));
    write_report(&report, out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canned(label: VerdictLabel, correct: usize, wrong: usize, undelivered: usize) -> Vec<CaseRow> {
        let other = if label == VerdictLabel::Good { VerdictLabel::Unreachable } else { VerdictLabel::Good };
        let mut rows = Vec::new();
        for i in 0..correct + wrong + undelivered {
            let predicted = if i < correct {
                Some(label)
            } else if i < correct + wrong {
                Some(other)
            } else {
                None
            };
            rows.push(CaseRow::new(&format!("t{i}__{}", label.as_str()), label, predicted));
        }
        rows
    }

    #[test]
    fn single_category_mean_is_that_category() {
        let r = compute_metrics(&canned(VerdictLabel::BadLogic, 3, 1, 0));
        assert_eq!(r.mean_accuracy, 75.0);
        assert_eq!(r.delivery_rate, 100.0);
    }

    #[test]
    fn all_correct_is_all_hundred() {
        let rows: Vec<CaseRow> = VerdictLabel::ALL.iter().flat_map(|l| canned(*l, 5, 0, 0)).collect();
        let r = compute_metrics(&rows);
        assert_eq!((r.delivery_rate, r.mean_accuracy), (100.0, 100.0));
        assert!(r.accuracy.values().all(|c| c.accuracy == 100.0));
    }

    #[test]
    fn table_has_the_expected_columns() {
        let r = compute_metrics(&canned(VerdictLabel::Good, 1, 1, 0));
        let t = render_table(&r, "besim");
        assert!(t.starts_with("Method  Delivery    Good  Bad Logic  Unreachable    Mean\n"), "{t}");
        assert!(t.contains("   100.0    50.0          -            -    50.0"), "{t}");
    }

    #[test]
    fn layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_benchmark(dir.path()).unwrap().is_empty());
        let task = dir.path().join("tasks/t1");
        std::fs::create_dir_all(&task).unwrap();
        std::fs::write(task.join("task.txt"), "Clean book").unwrap();
        let xml = r#"<bt><desc label="clean_book">x</desc><action label="clean_book"/></bt>"#;
        std::fs::write(task.join("good.xml"), xml).unwrap();
        std::fs::write(task.join("bad_logic.xml"), xml).unwrap();
        let err = load_benchmark(dir.path()).unwrap_err();
        assert!(matches!(&err, BenchError::Layout(m) if m.contains("unreachable.xml")), "{err}");
        std::fs::write(task.join("unreachable.xml"), "<bt><action/></bt>").unwrap();
        assert!(matches!(load_benchmark(dir.path()), Err(BenchError::Parse { .. })));
    }
}
