//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, load_benchmark, render_table, run_benchmark, BenchCase};
use crate::bt_engine::parse_bt;
use crate::case_gen::{generate_case, load_case, save_case, SimulationCase, TaskGoal};
use crate::cbs::{SimConfig, SimMode, Templates};
use crate::evaluation::VerdictLabel;
use crate::llm_backend::{
    Backend, BackendError, LiveBackend, LiveConfig, MockBackend, Recorder, RecordingBackend, ReplayBackend,
};
use crate::tracing::{load_artifact, run_dir, save_artifact, verify_artifact, JsonlSink};

#[derive(Debug, Parser)]
#[command(name = "besim", version, about = "Simulate robot behavior trees against a language-model world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one tree and print its verdict.
    Simulate(SimulateArgs),
    /// Generate a simulation case for a task and tree.
    GenCase(GenCaseArgs),
    /// Run every tree of a benchmark directory and write report.json.
    Bench(BenchArgs),
    /// Rebuild report.json from saved run artifacts.
    Report(ReportArgs),
    /// Re-check a saved run artifact.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Cbs,
    #[value(name = "single_phase")]
    SinglePhase,
}

#[derive(Debug, Args)]
struct SimFlags {
    /// live | mock | mock:FILE | replay:FILE | record:FILE
    #[arg(long, default_value = "mock")]
    backend: String,
    /// Backend wrapped by record:FILE.
    #[arg(long, default_value = "live")]
    record_inner: String,
    #[arg(long, value_enum, default_value = "cbs")]
    mode: ModeArg,
    /// Judge numeric conditions in prose instead of sandbox programs.
    #[arg(long)]
    no_code: bool,
    /// Re-asks allowed per exchange; 0 disables feedback.
    #[arg(long, default_value_t = crate::feedback::DEFAULT_MAX_ROUNDS)]
    max_feedback: usize,
    #[arg(long)]
    model: Option<String>,
    /// Directory of prompt templates overriding the built-in ones.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Pre-generated case; without it a case is generated from --task.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Expected label, recorded in the artifact.
    #[arg(long)]
    expected: Option<VerdictLabel>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Debug, Args)]
struct GenCaseArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    artifact: PathBuf,
}

type CliResult = Result<i32, String>;

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::GenCase(a) => gen_case(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn config(flags: &SimFlags) -> Result<SimConfig, String> {
    let mut cfg = SimConfig {
        mode: match flags.mode {
            ModeArg::Cbs => SimMode::Cbs,
            ModeArg::SinglePhase => SimMode::SinglePhase,
        },
        code_reasoning: !flags.no_code,
        max_feedback: flags.max_feedback,
        ..SimConfig::default()
    };
    if let Some(dir) = &flags.templates {
        cfg.templates = Arc::new(Templates::load_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?);
    }
    if let Some(m) = &flags.model {
        cfg.model = m.clone();
    } else if let Ok(m) = std::env::var("BESIM_MODEL") {
        cfg.model = m;
    }
    Ok(cfg)
}

/// Builds backends from a `--backend` spec. `mock` without a file uses the
/// `mock.json` beside the tree (or in the benchmark task).
struct BackendSpec {
    kind: String,
    file: Option<PathBuf>,
    inner: Option<Box<BackendSpec>>,
    shared: Option<Arc<dyn Backend>>,
    recorder: Option<Arc<Recorder>>,
}

impl BackendSpec {
    fn parse(spec: &str, record_inner: &str) -> Result<Self, String> {
        let (kind, file) = match spec.split_once(':') {
            Some((k, f)) => (k.to_string(), Some(PathBuf::from(f))),
            None => (spec.to_string(), None),
        };
        let mut s = BackendSpec { kind, file, inner: None, shared: None, recorder: None };
        match (s.kind.as_str(), &s.file) {
            ("live", None) => {
                let cfg = LiveConfig::from_env().map_err(|e| e.to_string())?;
                s.shared = Some(Arc::new(LiveBackend::new(cfg)));
            }
            ("mock", _) => {}
            ("replay", Some(f)) => s.shared = Some(Arc::new(ReplayBackend::load(f).map_err(|e| e.to_string())?)),
            ("record", Some(f)) => {
                if record_inner.starts_with("record") {
                    return Err("--record-inner cannot itself record".into());
                }
                s.inner = Some(Box::new(BackendSpec::parse(record_inner, "live")?));
                s.recorder = Some(Recorder::create(f).map_err(|e| e.to_string())?);
            }
            _ => return Err(format!("unknown backend `{spec}` (live | mock | mock:FILE | replay:FILE | record:FILE)")),
        }
        Ok(s)
    }

    /// A backend for one run; `default_mock` is used for a bare `mock`.
    fn make(&self, default_mock: Option<&Path>) -> Result<Arc<dyn Backend>, BackendError> {
        if let Some(b) = &self.shared {
            return Ok(b.clone());
        }
        if let (Some(inner), Some(rec)) = (&self.inner, &self.recorder) {
            return Ok(Arc::new(RecordingBackend::new(inner.make(default_mock)?, rec.clone())));
        }
        let path = self.file.as_deref().or(default_mock).ok_or_else(|| {
            BackendError::Config("bare `mock` needs a mock.json beside the tree; use mock:FILE".into())
        })?;
        Ok(Arc::new(MockBackend::load(path)?))
    }
}

fn sibling_mock(tree: &Path) -> Option<PathBuf> {
    Some(tree.with_file_name("mock.json")).filter(|p| p.is_file())
}

fn simulate(a: SimulateArgs) -> CliResult {
    let cfg = config(&a.sim)?;
    let xml = std::fs::read_to_string(&a.tree).map_err(|e| format!("{}: {e}", a.tree.display()))?;
    let tree = parse_bt(&xml).map_err(|e| format!("{}: {e}", a.tree.display()))?;
    let case: Option<SimulationCase> = match &a.case {
        Some(p) => Some(load_case(p).map_err(|e| e.to_string())?),
        None => None,
    };
    let task = match (&case, &a.task) {
        (_, Some(t)) => t.clone(),
        (Some(c), None) => c.goal.task_description.clone(),
        (None, None) => return Err("give --case or --task".into()),
    };
    let spec = BackendSpec::parse(&a.sim.backend, &a.sim.record_inner)?;
    let backend = spec.make(sibling_mock(&a.tree).as_deref()).map_err(|e| e.to_string())?;
    let run_id = a.run_id.clone().unwrap_or_else(|| tree.name.clone());
    let dir = run_dir(&a.out, &run_id);
    let mut sink = JsonlSink::create(&dir.join("events.jsonl")).map_err(|e| e.to_string())?;
    let task_id = a.tree.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("task").to_string();
    let artifact =
        bench::run_one(&run_id, &task_id, &task, &tree, case.as_ref(), a.expected, backend.as_ref(), &cfg, &mut sink);
    sink.finish().map_err(|e| e.to_string())?;
    let path = dir.join("artifact.json");
    save_artifact(&artifact, &path).map_err(|e| e.to_string())?;
    println!("artifact: {}", path.display());
    match &artifact.verdict {
        Some(v) => {
            match &v.failed_node {
                Some(n) => println!("verdict: {} (failed node: {n})", v.label),
                None => println!("verdict: {}", v.label),
            }
            Ok(0)
        }
        None => {
            println!("undelivered: {}", artifact.failure.as_deref().unwrap_or("unknown failure"));
            Ok(1)
        }
    }
}

fn gen_case(a: GenCaseArgs) -> CliResult {
    let cfg = config(&a.sim)?;
    let xml = std::fs::read_to_string(&a.tree).map_err(|e| format!("{}: {e}", a.tree.display()))?;
    let tree = parse_bt(&xml).map_err(|e| format!("{}: {e}", a.tree.display()))?;
    let spec = BackendSpec::parse(&a.sim.backend, &a.sim.record_inner)?;
    let backend = spec.make(sibling_mock(&a.tree).as_deref()).map_err(|e| e.to_string())?;
    let (record, case) = generate_case(&a.task, &tree, backend.as_ref(), &cfg);
    let case = case.map_err(|e| e.to_string())?;
    save_case(&case, &a.output).map_err(|e| e.to_string())?;
    let TaskGoal { goal_conditions, .. } = &case.goal;
    println!(
        "case: {} ({} entities, {} goal conditions, {} feedback rounds)",
        a.output.display(),
        case.initial_state.entities().count(),
        goal_conditions.len(),
        record.rounds
    );
    Ok(0)
}

fn bench_cmd(a: BenchArgs) -> CliResult {
    let cfg = config(&a.sim)?;
    let cases = load_benchmark(&a.dir).map_err(|e| e.to_string())?;
    let spec = BackendSpec::parse(&a.sim.backend, &a.sim.record_inner)?;
    let factory = |case: &BenchCase, _: VerdictLabel| spec.make(case.mock.as_deref());
    let report = run_benchmark(&cases, &factory, &cfg, &a.out, a.workers).map_err(|e| e.to_string())?;
    print!("{}", render_table(&report, &format!("besim ({})", cfg.model)));
    println!("report: {}", a.out.join("report.json").display());
    Ok(0)
}

fn report_cmd(a: ReportArgs) -> CliResult {
    let report = bench::report(&a.out).map_err(|e| e.to_string())?;
    print!("{}", render_table(&report, "besim"));
    Ok(0)
}

fn verify_cmd(a: VerifyArgs) -> CliResult {
    let artifact = load_artifact(&a.artifact).map_err(|e| e.to_string())?;
    let violations = verify_artifact(&artifact);
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {}", a.artifact.display());
        Ok(0)
    } else {
        Ok(1)
    }
}
