//! Kernel evaluation behind one interface: an external benchmarking
//! command, or a deterministic mock driven by marker tokens in the source.
//!
//! Submissions are strictly sequential process-wide: every [`Evaluator`]
//! shares one FIFO ticket lock, so at most one evaluation is in flight and
//! waiting callers run in arrival order.
//!
//! External command protocol. The command template may use
//! `{source_path}`, `{shapes_path}`, `{result_path}` and `{workdir}`; it runs
//! through `sh -c` with the per-evaluation temp directory as working
//! directory. The shapes file holds one `m k n` line per configuration. On
//! exit code 0 the command must have written the result file, one
//! `m k n mean_time_us correct` line per configuration in shape order
//! (`correct` is `true`/`false`/`1`/`0`; blank lines and `#` comments are
//! ignored). Any other exit code is a build or run failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::population::{render_shapes, BenchmarkEntry, BenchmarkReport, BenchmarkShape, KernelStatus};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
const LOG_LIMIT: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    /// Speedup factor per marker token; timings are multiplied by the
    /// factor of every marker present in the source.
    #[serde(default)]
    pub speedups: BTreeMap<String, f64>,
    #[serde(default = "default_incorrect_markers")]
    pub incorrect_markers: Vec<String>,
    #[serde(default = "default_build_fail_markers")]
    pub build_fail_markers: Vec<String>,
    /// Artificial latency per evaluation.
    #[serde(default)]
    pub delay_ms: u64,
}

fn default_incorrect_markers() -> Vec<String> {
    vec!["BUG".into()]
}

fn default_build_fail_markers() -> Vec<String> {
    vec!["BUILD_FAIL".into()]
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            speedups: BTreeMap::new(),
            incorrect_markers: default_incorrect_markers(),
            build_fail_markers: default_build_fail_markers(),
            delay_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvaluatorKind {
    ExternalCommand { command_template: String },
    Mock(MockSettings),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorConfig {
    pub kind: EvaluatorKind,
    pub timeout: Duration,
    pub shapes: Vec<BenchmarkShape>,
}

impl EvaluatorConfig {
    pub fn mock(shapes: Vec<BenchmarkShape>, settings: MockSettings) -> Self {
        Self {
            kind: EvaluatorKind::Mock(settings),
            timeout: DEFAULT_TIMEOUT,
            shapes,
        }
    }

    pub fn external(shapes: Vec<BenchmarkShape>, command_template: impl Into<String>, timeout: Duration) -> Self {
        Self {
            kind: EvaluatorKind::ExternalCommand {
                command_template: command_template.into(),
            },
            timeout,
            shapes,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.shapes.is_empty() {
            return Err("evaluator needs at least one benchmark shape".into());
        }
        for s in &self.shapes {
            s.validate()?;
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return Err(format!("duplicate benchmark shape {}", s.label()));
            }
        }
        if self.timeout.is_zero() {
            return Err("timeout must be positive".into());
        }
        match &self.kind {
            EvaluatorKind::ExternalCommand { command_template } => {
                if !command_template.contains("{source_path}") {
                    return Err("command template must reference {source_path}".into());
                }
            }
            EvaluatorKind::Mock(m) => {
                for (marker, f) in &m.speedups {
                    if !(f.is_finite() && *f > 0.0) {
                        return Err(format!("speedup for {marker} must be a positive number"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Report(BenchmarkReport),
    BuildFailed { log: String },
    Incorrect { entries: Vec<BenchmarkEntry> },
    EvalError { diagnostic: String },
}

impl EvalOutcome {
    /// Status of a child record carrying this outcome.
    pub fn status(&self) -> KernelStatus {
        match self {
            EvalOutcome::Report(_) => KernelStatus::Evaluated,
            EvalOutcome::BuildFailed { .. } => KernelStatus::BuildFailed,
            EvalOutcome::Incorrect { .. } => KernelStatus::Incorrect,
            EvalOutcome::EvalError { .. } => KernelStatus::EvalError,
        }
    }

    pub fn report(&self) -> Option<&BenchmarkReport> {
        match self {
            EvalOutcome::Report(r) => Some(r),
            _ => None,
        }
    }

    /// Failure detail for the record; `None` on success.
    pub fn failure_detail(&self) -> Option<String> {
        match self {
            EvalOutcome::Report(_) => None,
            EvalOutcome::BuildFailed { log } => Some(log.clone()),
            EvalOutcome::Incorrect { entries } => {
                let mut s = String::from("incorrect results for:");
                for e in entries.iter().filter(|e| !e.correct) {
                    let _ = write!(s, " {}", e.shape.label());
                }
                Some(s)
            }
            EvalOutcome::EvalError { diagnostic } => Some(diagnostic.clone()),
        }
    }

    /// One-line summary for generation logs.
    pub fn summary(&self) -> String {
        match self {
            EvalOutcome::Report(r) => format!("evaluated, aggregate {:.3} us", r.aggregate_score()),
            EvalOutcome::BuildFailed { .. } => "build_failed".into(),
            EvalOutcome::Incorrect { entries } => format!(
                "incorrect on {} of {} shapes",
                entries.iter().filter(|e| !e.correct).count(),
                entries.len()
            ),
            EvalOutcome::EvalError { diagnostic } => {
                format!("eval_error: {}", diagnostic.lines().next().unwrap_or_default())
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("kernel source is empty")]
    EmptySource,
    #[error("invalid evaluator configuration: {0}")]
    Config(String),
}

/// Hooks invoked while an evaluation holds the submission lock.
pub trait EvalObserver: Send + Sync {
    fn entered(&self);
    fn exited(&self);
}

struct FifoLock {
    state: Mutex<(u64, u64)>,
    turn: Condvar,
}

struct FifoGuard<'a>(&'a FifoLock);

impl FifoLock {
    const fn new() -> Self {
        Self {
            state: Mutex::new((0, 0)),
            turn: Condvar::new(),
        }
    }

    fn lock(&self) -> FifoGuard<'_> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let ticket = state.0;
        state.0 += 1;
        while state.1 != ticket {
            state = self.turn.wait(state).unwrap_or_else(|p| p.into_inner());
        }
        FifoGuard(self)
    }
}

impl Drop for FifoGuard<'_> {
    fn drop(&mut self) {
        let mut state = self.0.state.lock().unwrap_or_else(|p| p.into_inner());
        state.1 += 1;
        self.0.turn.notify_all();
    }
}

static SUBMISSIONS: FifoLock = FifoLock::new();

#[derive(Clone)]
pub struct Evaluator {
    config: EvaluatorConfig,
    observer: Option<Arc<dyn EvalObserver>>,
}

impl std::fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluator")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Evaluator {
    pub fn new(config: EvaluatorConfig) -> Result<Self, EvalError> {
        config.validate().map_err(EvalError::Config)?;
        Ok(Self { config, observer: None })
    }

    pub fn with_observer(mut self, observer: Arc<dyn EvalObserver>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[BenchmarkShape] {
        &self.config.shapes
    }

    /// Evaluates one kernel. Blocks until every earlier submission in this
    /// process has finished.
    pub fn evaluate(&self, source: &str) -> Result<EvalOutcome, EvalError> {
        if source.trim().is_empty() {
            return Err(EvalError::EmptySource);
        }
        let _turn = SUBMISSIONS.lock();
        if let Some(o) = &self.observer {
            o.entered();
        }
        let outcome = match &self.config.kind {
            EvaluatorKind::Mock(settings) => evaluate_mock(source, &self.config.shapes, settings),
            EvaluatorKind::ExternalCommand { command_template } => {
                evaluate_external(source, command_template, &self.config)
            }
        };
        if let Some(o) = &self.observer {
            o.exited();
        }
        Ok(outcome)
    }
}

fn tokens(source: &str) -> impl Iterator<Item = &str> {
    source
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
}

fn has_token(source: &str, marker: &str) -> bool {
    tokens(source).any(|t| t == marker)
}

/// √(m·k·n) µs scaled by the speedup factor of every marker token present
/// in `source`. Each marker counts once, however often it appears.
pub fn mock_timing(source: &str, shape: &BenchmarkShape, speedups: &BTreeMap<String, f64>) -> f64 {
    let base = (shape.m as f64 * shape.k as f64 * shape.n as f64).sqrt();
    speedups
        .iter()
        .filter(|(marker, _)| has_token(source, marker))
        .fold(base, |t, (_, f)| t * f)
}

fn evaluate_mock(source: &str, shapes: &[BenchmarkShape], settings: &MockSettings) -> EvalOutcome {
    if settings.delay_ms > 0 {
        std::thread::sleep(Duration::from_millis(settings.delay_ms));
    }
    if let Some(m) = settings.build_fail_markers.iter().find(|m| has_token(source, m)) {
        return EvalOutcome::BuildFailed {
            log: format!("mock build failure: source contains {m}"),
        };
    }
    let buggy = settings.incorrect_markers.iter().any(|m| has_token(source, m));
    let entries: Vec<BenchmarkEntry> = shapes
        .iter()
        .map(|shape| BenchmarkEntry {
            shape: *shape,
            mean_time_us: mock_timing(source, shape, &settings.speedups),
            correct: !buggy,
        })
        .collect();
    if buggy {
        EvalOutcome::Incorrect { entries }
    } else {
        EvalOutcome::Report(BenchmarkReport {
            entries,
            evaluated_at: Utc::now(),
        })
    }
}

/// Parses a result file against the configured shapes.
pub fn parse_result_file(text: &str, shapes: &[BenchmarkShape]) -> Result<Vec<BenchmarkEntry>, String> {
    let mut entries = Vec::with_capacity(shapes.len());
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| format!("result line {}: {msg}", lineno + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [m, k, n, time, correct] = fields.as_slice() else {
            return Err(at(format!(
                "expected `m k n mean_time_us correct`, got {} fields",
                fields.len()
            )));
        };
        let dim = |s: &str| s.parse::<u64>().map_err(|_| at(format!("bad dimension {s:?}")));
        let shape = BenchmarkShape::new(dim(m)?, dim(k)?, dim(n)?).map_err(at)?;
        let mean_time_us: f64 = time.parse().map_err(|_| at(format!("bad time {time:?}")))?;
        if !(mean_time_us.is_finite() && mean_time_us > 0.0) {
            return Err(at(format!("time must be positive, got {time}")));
        }
        let correct = match correct.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "ok" => true,
            "false" | "0" | "no" | "fail" => false,
            other => return Err(at(format!("bad correctness flag {other:?}"))),
        };
        let Some(expected) = shapes.get(entries.len()) else {
            return Err(at(format!("unexpected extra result for {}", shape.label())));
        };
        if shape != *expected {
            return Err(at(format!(
                "result for {} where {} was expected",
                shape.label(),
                expected.label()
            )));
        }
        entries.push(BenchmarkEntry {
            shape,
            mean_time_us,
            correct,
        });
    }
    if entries.len() != shapes.len() {
        return Err(format!(
            "result file covers {} of {} configured shapes",
            entries.len(),
            shapes.len()
        ));
    }
    Ok(entries)
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', "'\\''"))
}

fn evaluate_external(source: &str, template: &str, config: &EvaluatorConfig) -> EvalOutcome {
    match run_external(source, template, config) {
        Ok(outcome) => outcome,
        Err(e) => EvalOutcome::EvalError {
            diagnostic: format!("evaluation harness failure: {e}"),
        },
    }
}

fn run_external(source: &str, template: &str, config: &EvaluatorConfig) -> std::io::Result<EvalOutcome> {
    let workdir = tempfile::Builder::new().prefix("kernel-eval-").tempdir()?;
    let dir = workdir.path();
    let source_path = dir.join("submission.kernel");
    let shapes_path = dir.join("shapes.txt");
    let result_path = dir.join("result.txt");
    let log_path = dir.join("output.log");
    fs::write(&source_path, source)?;
    fs::write(&shapes_path, render_shapes(&config.shapes))?;

    let command = template
        .replace("{source_path}", &shell_quote(&source_path))
        .replace("{shapes_path}", &shell_quote(&shapes_path))
        .replace("{result_path}", &shell_quote(&result_path))
        .replace("{workdir}", &shell_quote(dir));
    let log = fs::File::create(&log_path)?;
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log);
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd.spawn()?;

    let deadline = Instant::now() + config.timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            kill_tree(&mut child);
            return Ok(EvalOutcome::EvalError {
                diagnostic: format!(
                    "timed out after {:.1} s\n{}",
                    config.timeout.as_secs_f64(),
                    read_log(&log_path)
                ),
            });
        }
        std::thread::sleep(Duration::from_millis(10));
    };

    if !status.success() {
        return Ok(EvalOutcome::BuildFailed {
            log: format!("command exited with {status}\n{}", read_log(&log_path)),
        });
    }
    let text = match fs::read_to_string(&result_path) {
        Ok(t) => t,
        Err(e) => {
            return Ok(EvalOutcome::EvalError {
                diagnostic: format!(
                    "command succeeded but result file is unreadable: {e}\n{}",
                    read_log(&log_path)
                ),
            })
        }
    };
    Ok(match parse_result_file(&text, &config.shapes) {
        Ok(entries) if entries.iter().all(|e| e.correct) => EvalOutcome::Report(BenchmarkReport {
            entries,
            evaluated_at: Utc::now(),
        }),
        Ok(entries) => EvalOutcome::Incorrect { entries },
        Err(e) => EvalOutcome::EvalError { diagnostic: e },
    })
}

fn kill_tree(child: &mut std::process::Child) {
    // the child leads its own process group, so this reaches grandchildren
    #[cfg(unix)]
    if let Ok(pgid) = libc::pid_t::try_from(child.id()) {
        if pgid > 0 {
            // SAFETY: plain syscall on a process group we created
            unsafe {
                libc::killpg(pgid, libc::SIGKILL);
            }
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

fn read_log(path: &Path) -> String {
    let bytes = fs::read(path).unwrap_or_default();
    let start = bytes.len().saturating_sub(LOG_LIMIT);
    String::from_utf8_lossy(&bytes[start..]).into_owned()
}
