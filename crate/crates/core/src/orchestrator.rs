//! The generation loop: select parents, design experiments, write three
//! kernels concurrently, evaluate them one at a time, and record the
//! results.
//!
//! Workspace layout:
//!
//! ```text
//! population/                 see [`crate::population`]
//! knowledge/                  see [`crate::knowledge`]
//! generations/<seq>/selection decision document
//! generations/<seq>/design    avenues and all five plans
//! generations/<seq>/log       GenerationLog (YAML)
//! generations/<seq>/transcripts/, writer-<n>/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::designer::{design_experiments, render_design, DesignOutput, ExperimentPlan};
use crate::evaluation::{EvalError, EvalOutcome, Evaluator};
use crate::fsutil::write_atomic;
use crate::gateway::{write_transcripts, Gateway, Parsed};
use crate::knowledge::{KnowledgeBase, KnowledgeDoc, KnowledgeError};
use crate::population::{NewRecord, Population, PopulationError, RecordId};
use crate::selector::{render_selection, select_parents, SelectionDecision, SelectorError};
use crate::writer::{assemble_writer_context, write_kernel, KernelCandidate, WriterError};

pub const POPULATION_DIR: &str = "population";
pub const KNOWLEDGE_DIR: &str = "knowledge";
pub const GENERATIONS_DIR: &str = "generations";
pub const LOG_FILE: &str = "log";
pub const SELECTION_FILE: &str = "selection";
pub const DESIGN_FILE: &str = "design";

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("no seed sources given")]
    NoSeeds,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("no eligible kernels to select from")]
    NoEligibleRecords,
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error("writer context: {0}")]
    Writer(WriterError),
    #[error("corrupt generation log {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("storage failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Completed,
    /// Selector or designer produced no usable output.
    Aborted,
    /// Rebuilt on startup from records of an interrupted generation.
    Recovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedDecision {
    pub basis_code: RecordId,
    pub basis_reference: RecordId,
    pub rationale: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub plan_ordinal: u8,
    /// New record, or `None` when the writer gave up (abandoned).
    pub record: Option<RecordId>,
    pub result: String,
    #[serde(default)]
    pub writer_attempts: Option<u32>,
}

impl ExperimentOutcome {
    pub fn is_abandoned(&self) -> bool {
        self.record.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub seq: u32,
    pub status: GenerationStatus,
    #[serde(default)]
    pub abort_reason: Option<String>,
    #[serde(default)]
    pub decision: Option<LoggedDecision>,
    /// Avenues and all five plans; persisted in the `design` file.
    #[serde(skip)]
    pub plans_all: Option<DesignOutput>,
    #[serde(default)]
    pub plans_chosen: Vec<u8>,
    #[serde(default)]
    pub outcomes: Vec<ExperimentOutcome>,
    #[serde(default)]
    pub best: Option<RecordId>,
    #[serde(default)]
    pub best_score: Option<f64>,
    pub wall_time_s: f64,
}

pub fn parse_generation_log(text: &str) -> std::result::Result<GenerationLog, String> {
    serde_yaml::from_str(text).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub generations: Vec<GenerationLog>,
    pub best: Option<RecordId>,
    pub best_score: Option<f64>,
    pub population_size: usize,
}

/// Owns the workspace state and the stage dependencies.
pub struct Scientist {
    root: PathBuf,
    population: Population,
    knowledge: KnowledgeBase,
    gateway: Gateway,
    evaluator: Evaluator,
    task_description: String,
    context_budget: Option<usize>,
}

impl Scientist {
    /// Opens (or creates) the workspace at `root`. Records left by an
    /// interrupted generation get a recovered log.
    pub fn open(
        root: impl Into<PathBuf>,
        gateway: Gateway,
        evaluator: Evaluator,
        task_description: impl Into<String>,
        context_budget: Option<usize>,
    ) -> Result<Self> {
        let root = root.into();
        let population = Population::open_or_create(root.join(POPULATION_DIR), evaluator.shapes())?;
        let knowledge = KnowledgeBase::open(root.join(KNOWLEDGE_DIR))?;
        let scientist = Self {
            root,
            population,
            knowledge,
            gateway,
            evaluator,
            task_description: task_description.into(),
            context_budget,
        };
        scientist.recover_interrupted()?;
        Ok(scientist)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    pub fn knowledge(&self) -> &KnowledgeBase {
        &self.knowledge
    }

    pub fn knowledge_mut(&mut self) -> &mut KnowledgeBase {
        &mut self.knowledge
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn task_description(&self) -> &str {
        &self.task_description
    }

    fn generation_dir(&self, seq: u32) -> PathBuf {
        generation_dir(&self.root, seq)
    }

    /// Evaluates and stores each source as a seed record, in order.
    pub fn seed(&mut self, sources: &[String]) -> Result<Vec<RecordId>> {
        if sources.is_empty() {
            return Err(OrchestratorError::NoSeeds);
        }
        let mut ids = Vec::with_capacity(sources.len());
        for source in sources {
            let outcome = self.evaluator.evaluate(source)?;
            let mut record = NewRecord::seed(source.clone());
            record.benchmark = outcome.report().cloned();
            record.failure = outcome.failure_detail();
            let id = self.population.add_record(record)?;
            tracing::info!(%id, "seed evaluated: {}", outcome.summary());
            ids.push(id);
        }
        Ok(ids)
    }

    /// Sequence number the next generation will get.
    pub fn next_generation_seq(&self) -> Result<u32> {
        Ok(logged_generations(&self.root)?.last().map_or(0, |s| *s) + 1)
    }

    /// Runs one full generation and persists its log.
    pub fn run_generation(&mut self) -> Result<GenerationLog> {
        if self.population.eligible().next().is_none() {
            return Err(OrchestratorError::NoEligibleRecords);
        }
        let started = Instant::now();
        let seq = self.next_generation_seq()?;
        let dir = self.generation_dir(seq);
        if dir.exists() {
            // partial output of a generation that never logged
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let knowledge = self.knowledge.snapshot(self.context_budget);

        let mut log = GenerationLog {
            seq,
            status: GenerationStatus::Completed,
            abort_reason: None,
            decision: None,
            plans_all: None,
            plans_chosen: Vec::new(),
            outcomes: Vec::new(),
            best: None,
            best_score: None,
            wall_time_s: 0.0,
        };

        let selection = select_parents(&self.gateway, &self.population);
        self.persist_transcripts(&dir.join("transcripts"), "selector")?;
        let selection = match selection {
            Ok(s) => s,
            Err(SelectorError::EmptyPopulation) => return Err(OrchestratorError::NoEligibleRecords),
            Err(SelectorError::Gateway(e)) => return self.abort(log, started, format!("selector: {e}")),
        };
        let decision = selection.decision.clone();
        write_file(&dir.join(SELECTION_FILE), &render_selection(&decision))?;
        log.decision = Some(LoggedDecision {
            basis_code: decision.basis_code,
            basis_reference: decision.basis_reference,
            rationale: decision.rationale.clone(),
            attempts: selection.attempts,
        });

        let base = self.population.get(decision.basis_code)?;
        let designed = design_experiments(&self.gateway, base, &knowledge);
        self.persist_transcripts(&dir.join("transcripts"), "designer")?;
        let designed = match designed {
            Ok(d) => d,
            Err(e) => return self.abort(log, started, format!("designer: {e}")),
        };
        write_file(&dir.join(DESIGN_FILE), &render_design(&designed.output))?;
        log.plans_chosen = designed.chosen.iter().map(|p| p.ordinal).collect();
        log.plans_all = Some(designed.output.clone());

        let candidates = self.write_candidates(&decision, &designed.chosen, &knowledge)?;

        for (lane_no, (plan, candidate)) in designed.chosen.iter().zip(candidates).enumerate() {
            let lane = writer_lane(lane_no);
            let transcripts = self.gateway.take_transcripts(&lane);
            write_transcripts(&dir.join(&lane), &transcripts).map_err(io_err(&dir))?;
            let outcome = match candidate {
                Ok(Parsed { value, attempts }) => {
                    let (id, result) = self.evaluate_and_record(seq, &decision, plan, value)?;
                    let record_transcripts = self.population.transcripts_dir(id)?;
                    write_transcripts(&record_transcripts, &transcripts).map_err(io_err(&record_transcripts))?;
                    ExperimentOutcome {
                        plan_ordinal: plan.ordinal,
                        record: Some(id),
                        result: result.summary(),
                        writer_attempts: Some(attempts),
                    }
                }
                Err(e) => {
                    tracing::warn!(seq, plan = plan.ordinal, "experiment abandoned: {e}");
                    ExperimentOutcome {
                        plan_ordinal: plan.ordinal,
                        record: None,
                        result: format!("abandoned: {e}"),
                        writer_attempts: u32::try_from(transcripts.len()).ok(),
                    }
                }
            };
            log.outcomes.push(outcome);
        }

        self.finish(log, started)
    }

    fn write_candidates(
        &self,
        decision: &SelectionDecision,
        plans: &[ExperimentPlan],
        knowledge: &[KnowledgeDoc],
    ) -> Result<Vec<Result<Parsed<KernelCandidate>, WriterError>>> {
        let contexts = plans
            .iter()
            .map(|plan| assemble_writer_context(decision, plan, &self.population, knowledge, &self.task_description))
            .collect::<Result<Vec<_>, _>>()
            .map_err(OrchestratorError::Writer)?;
        let gateway = &self.gateway;
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = contexts
                .iter()
                .enumerate()
                .map(|(i, ctx)| scope.spawn(move || write_kernel(gateway, &writer_lane(i), ctx)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("writer thread panicked"))
                .collect()
        });
        Ok(results)
    }

    fn evaluate_and_record(
        &mut self,
        seq: u32,
        decision: &SelectionDecision,
        plan: &ExperimentPlan,
        candidate: KernelCandidate,
    ) -> Result<(RecordId, EvalOutcome)> {
        let outcome = self.evaluator.evaluate(&candidate.source)?;
        let mut record = NewRecord::child(
            decision.basis_code,
            decision.basis_reference,
            candidate.source,
            plan.clone(),
        );
        record.technique_report = Some(candidate.technique_report);
        record.status = outcome.status();
        record.benchmark = outcome.report().cloned();
        record.failure = outcome.failure_detail();
        record.generation = Some(seq);
        let id = self.population.add_record(record)?;
        tracing::info!(seq, %id, plan = plan.ordinal, "{}", outcome.summary());
        Ok((id, outcome))
    }

    fn persist_transcripts(&self, dir: &Path, lane: &str) -> Result<()> {
        let transcripts = self.gateway.take_transcripts(lane);
        write_transcripts(dir, &transcripts).map_err(io_err(dir))
    }

    fn abort(&self, mut log: GenerationLog, started: Instant, reason: String) -> Result<GenerationLog> {
        tracing::warn!(seq = log.seq, "generation aborted: {reason}");
        log.status = GenerationStatus::Aborted;
        log.abort_reason = Some(reason);
        self.finish(log, started)
    }

    fn finish(&self, mut log: GenerationLog, started: Instant) -> Result<GenerationLog> {
        if let Ok(best) = self.population.best_record() {
            log.best = Some(best);
            log.best_score = self.population.get(best)?.aggregate_score();
        }
        log.wall_time_s = started.elapsed().as_secs_f64();
        let path = self.generation_dir(log.seq).join(LOG_FILE);
        let text = serde_yaml::to_string(&log).map_err(|e| OrchestratorError::Corrupt {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        write_file(&path, &text)?;
        Ok(log)
    }

    /// Runs up to `generations` more generations, stopping early at
    /// `max_seq` when given.
    pub fn run(&mut self, generations: u32, max_seq: Option<u32>) -> Result<RunSummary> {
        if self.population.is_empty() {
            return Err(OrchestratorError::EmptyPopulation);
        }
        let mut logs = Vec::new();
        for _ in 0..generations {
            if max_seq.is_some_and(|max| self.next_generation_seq().map_or(true, |s| s > max)) {
                break;
            }
            let log = self.run_generation()?;
            tracing::info!(
                seq = log.seq,
                status = ?log.status,
                best = ?log.best.map(|b| b.to_string()),
                best_score = ?log.best_score,
                "generation finished"
            );
            logs.push(log);
        }
        let best = self.population.best_record().ok();
        Ok(RunSummary {
            generations: logs,
            best,
            best_score: best.and_then(|b| self.population.get(b).ok()?.aggregate_score()),
            population_size: self.population.len(),
        })
    }

    /// Writes recovered logs for generations whose records exist but whose
    /// log was never written.
    fn recover_interrupted(&self) -> Result<()> {
        let last = logged_generations(&self.root)?.last().copied().unwrap_or(0);
        let mut orphaned: Vec<u32> = self
            .population
            .records()
            .iter()
            .filter_map(|r| r.generation)
            .filter(|g| *g > last)
            .collect();
        orphaned.dedup();
        for seq in orphaned {
            let records: Vec<_> = self
                .population
                .records()
                .iter()
                .filter(|r| r.generation == Some(seq))
                .collect();
            let first = records[0];
            let log = GenerationLog {
                seq,
                status: GenerationStatus::Recovered,
                abort_reason: Some("interrupted; rebuilt from stored records".into()),
                decision: Some(LoggedDecision {
                    basis_code: first.base_parent_id.expect("child has parents"),
                    basis_reference: first.reference_parent_id.expect("child has parents"),
                    rationale: String::new(),
                    attempts: 0,
                }),
                plans_all: None,
                plans_chosen: records
                    .iter()
                    .filter_map(|r| r.experiment.as_ref().map(|e| e.ordinal))
                    .collect(),
                outcomes: records
                    .iter()
                    .map(|r| ExperimentOutcome {
                        plan_ordinal: r.experiment.as_ref().map_or(0, |e| e.ordinal),
                        record: Some(r.id),
                        result: r.status.to_string(),
                        writer_attempts: None,
                    })
                    .collect(),
                best: None,
                best_score: None,
                wall_time_s: 0.0,
            };
            tracing::warn!(seq, "recovering interrupted generation");
            self.finish(log, Instant::now())?;
        }
        Ok(())
    }

    pub fn status(&self) -> Result<String> {
        status_report(&self.population)
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        export(&self.root, &self.population, dir)
    }
}

pub fn writer_lane(index: usize) -> String {
    format!("writer-{}", index + 1)
}

pub fn generation_dir(root: &Path, seq: u32) -> PathBuf {
    root.join(GENERATIONS_DIR).join(format!("{seq:04}"))
}

/// Sequence numbers of generations with a persisted log, ascending.
pub fn logged_generations(root: &Path) -> Result<Vec<u32>> {
    let dir = root.join(GENERATIONS_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut seqs = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let entry = entry.map_err(io_err(&dir))?;
        let Some(seq) = entry.file_name().to_str().and_then(|n| n.parse::<u32>().ok()) else {
            continue;
        };
        if entry.path().join(LOG_FILE).exists() {
            seqs.push(seq);
        }
    }
    seqs.sort_unstable();
    Ok(seqs)
}

/// Loads a generation log, with `plans_all` filled from its design file.
pub fn load_generation_log(root: &Path, seq: u32) -> Result<GenerationLog> {
    let dir = generation_dir(root, seq);
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut log = parse_generation_log(&text).map_err(|detail| OrchestratorError::Corrupt {
        path: path.clone(),
        detail,
    })?;
    let design = dir.join(DESIGN_FILE);
    if design.exists() {
        let text = fs::read_to_string(&design).map_err(io_err(&design))?;
        log.plans_all = crate::designer::parse_design(&text).ok();
    }
    Ok(log)
}

/// Population table plus the best record.
pub fn status_report(population: &Population) -> Result<String> {
    if population.is_empty() {
        return Err(OrchestratorError::EmptyPopulation);
    }
    let mut out = population.summarize().render_table();
    match population.best_record() {
        Ok(best) => {
            let score = population.get(best)?.aggregate_score().unwrap_or(f64::NAN);
            out.push_str(&format!("\nbest: {best} (aggregate {score:.3} us)\n"));
        }
        Err(_) => out.push_str("\nbest: none (no successfully evaluated kernels)\n"),
    }
    Ok(out)
}

/// Writes the best kernel, its base-parent lineage, and every generation
/// log to `dir`.
pub fn export(root: &Path, population: &Population, dir: &Path) -> Result<()> {
    if population.is_empty() {
        return Err(OrchestratorError::EmptyPopulation);
    }
    let best = population.best_record()?;
    let record = population.get(best)?;
    write_file(&dir.join("best.kernel"), &record.source)?;
    let chain = population.lineage(best)?;
    let mut lineage = String::new();
    for id in &chain {
        let r = population.get(*id)?;
        let score = r
            .aggregate_score()
            .map_or_else(|| "-".to_string(), |s| format!("{s:.3}"));
        lineage.push_str(&format!(
            "{id} status={} aggregate_us={score} experiment={:?}\n",
            r.status,
            r.experiment.as_ref().map(|e| e.description.as_str()).unwrap_or("seed")
        ));
        copy_dir(&population.record_dir(*id), &dir.join("lineage").join(id.to_string()))?;
    }
    write_file(&dir.join("lineage.txt"), &lineage)?;
    write_file(&dir.join("status.md"), &status_report(population)?)?;
    for seq in logged_generations(root)? {
        copy_dir(
            &generation_dir(root, seq),
            &dir.join(GENERATIONS_DIR).join(format!("{seq:04}")),
        )?;
    }
    Ok(())
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(io_err(to))?;
    for entry in fs::read_dir(from).map_err(io_err(from))? {
        let entry = entry.map_err(io_err(from))?;
        let target = to.join(entry.file_name());
        if entry.file_type().map_err(io_err(from))?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

/// Shapes recorded in an existing workspace, for commands that run
/// without a config.
pub fn open_population(root: &Path) -> Result<Population> {
    Ok(Population::open(root.join(POPULATION_DIR))?)
}
