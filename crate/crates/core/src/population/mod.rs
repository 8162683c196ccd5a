//! File-backed population of kernel individuals.
//!
//! Layout under the population root:
//!
//! ```text
//! shapes              one `m k n` triple per line, fixed at creation
//! index               append-only, one `id base ref status created_seq` line per record
//! <id>/source.kernel  kernel source, verbatim
//! <id>/meta           YAML: id, parents, status, experiment, technique_report, ...
//! <id>/benchmark      YAML benchmark report (absent when never benchmarked)
//! <id>/transcripts/   LLM transcripts of the writer call that produced it
//! ```
//!
//! The index line is written last, so a record directory without an index
//! line is an interrupted insert and is ignored (and overwritten) on reload.

mod record;
mod summary;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::designer::ExperimentPlan;
use crate::fsutil::write_atomic;

pub use record::{
    geometric_mean, BenchmarkEntry, BenchmarkReport, BenchmarkShape, InvalidRecordId, KernelRecord, KernelStatus,
    NewRecord, RecordId, MAX_RECORD_ID,
};
pub use summary::{PopulationSummary, RowTimings, SummaryRow, FAILURE_MARKER};

pub const INDEX_FILE: &str = "index";
pub const SHAPES_FILE: &str = "shapes";
pub const SOURCE_FILE: &str = "source.kernel";
pub const META_FILE: &str = "meta";
pub const BENCHMARK_FILE: &str = "benchmark";
pub const TRANSCRIPTS_DIR: &str = "transcripts";

#[derive(Debug, thiserror::Error)]
pub enum PopulationError {
    #[error("unknown parent id {0}")]
    UnknownParent(RecordId),
    #[error("unknown record id {0:?}")]
    UnknownId(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("population has no evaluated records")]
    NoEvaluatedRecords,
    #[error("population is full ({MAX_RECORD_ID} records)")]
    Full,
    #[error("population at {path} was created with shapes {stored}, configuration has {configured}")]
    ShapeMismatch {
        path: PathBuf,
        stored: String,
        configured: String,
    },
    #[error("corrupt population file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("storage failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PopulationError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PopulationError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn corrupt(path: &Path, detail: impl Into<String>) -> Self {
        PopulationError::Corrupt {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = PopulationError> = std::result::Result<T, E>;

/// One line of the population index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: RecordId,
    pub base_parent_id: Option<RecordId>,
    pub reference_parent_id: Option<RecordId>,
    pub status: KernelStatus,
    pub created_seq: u64,
}

impl IndexEntry {
    pub fn to_line(&self) -> String {
        fn opt(id: Option<RecordId>) -> String {
            id.map_or_else(|| "-".to_string(), |i| i.to_string())
        }
        format!(
            "{} {} {} {} {}",
            self.id,
            opt(self.base_parent_id),
            opt(self.reference_parent_id),
            self.status,
            self.created_seq
        )
    }
}

/// Parses the text of an index file. Blank lines are skipped.
pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>, String> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, base, reference, status, seq] = fields.as_slice() else {
            return Err(format!("line {}: expected 5 fields, got {}", lineno + 1, fields.len()));
        };
        let parent = |s: &str| -> Result<Option<RecordId>, String> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| format!("line {}: {e}", lineno + 1))
            }
        };
        entries.push(IndexEntry {
            id: id.parse().map_err(|e| format!("line {}: {e}", lineno + 1))?,
            base_parent_id: parent(base)?,
            reference_parent_id: parent(reference)?,
            status: status.parse().map_err(|e| format!("line {}: {e}", lineno + 1))?,
            created_seq: seq
                .parse()
                .map_err(|_| format!("line {}: bad created_seq {seq:?}", lineno + 1))?,
        });
    }
    Ok(entries)
}

pub fn render_shapes(shapes: &[BenchmarkShape]) -> String {
    shapes.iter().map(|s| format!("{} {} {}\n", s.m, s.k, s.n)).collect()
}

/// Parses `m k n` lines (blank lines and `#` comments ignored).
pub fn parse_shapes(text: &str) -> Result<Vec<BenchmarkShape>, String> {
    let mut shapes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let dims: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        let [m, k, n] = dims.as_slice() else {
            return Err(format!("line {}: expected `m k n`", lineno + 1));
        };
        shapes.push(BenchmarkShape::new(*m, *k, *n).map_err(|e| format!("line {}: {e}", lineno + 1))?);
    }
    Ok(shapes)
}

/// Serialized form of `<id>/meta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: RecordId,
    pub base_parent_id: Option<RecordId>,
    pub reference_parent_id: Option<RecordId>,
    pub status: KernelStatus,
    pub created_seq: u64,
    #[serde(default)]
    pub generation: Option<u32>,
    #[serde(default)]
    pub experiment: Option<ExperimentPlan>,
    #[serde(default)]
    pub technique_report: Option<String>,
    #[serde(default)]
    pub failure: Option<String>,
}

pub fn parse_meta(text: &str) -> Result<RecordMeta, String> {
    serde_yaml::from_str(text).map_err(|e| e.to_string())
}

pub fn parse_benchmark(text: &str) -> Result<BenchmarkReport, String> {
    serde_yaml::from_str(text).map_err(|e| e.to_string())
}

/// The population store. All mutation goes through [`Population::add_record`].
#[derive(Debug)]
pub struct Population {
    root: PathBuf,
    shapes: Vec<BenchmarkShape>,
    records: Vec<KernelRecord>,
}

impl Population {
    /// Opens the population at `root`, creating it with `shapes` if absent.
    /// An existing population must have been created with the same shapes.
    pub fn open_or_create(root: impl Into<PathBuf>, shapes: &[BenchmarkShape]) -> Result<Self> {
        let root = root.into();
        if root.join(SHAPES_FILE).exists() {
            let population = Self::open(&root)?;
            if population.shapes != shapes {
                return Err(PopulationError::ShapeMismatch {
                    path: root,
                    stored: shape_list(&population.shapes),
                    configured: shape_list(shapes),
                });
            }
            return Ok(population);
        }
        if shapes.is_empty() {
            return Err(PopulationError::InvalidRecord("shape list is empty".into()));
        }
        for s in shapes {
            s.validate().map_err(PopulationError::InvalidRecord)?;
        }
        fs::create_dir_all(&root).map_err(|e| PopulationError::io(&root, e))?;
        let shapes_path = root.join(SHAPES_FILE);
        write_atomic(&shapes_path, render_shapes(shapes).as_bytes())
            .map_err(|e| PopulationError::io(&shapes_path, e))?;
        let index_path = root.join(INDEX_FILE);
        if !index_path.exists() {
            write_atomic(&index_path, b"").map_err(|e| PopulationError::io(&index_path, e))?;
        }
        Ok(Self {
            root,
            shapes: shapes.to_vec(),
            records: Vec::new(),
        })
    }

    /// Loads an existing population.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let shapes_path = root.join(SHAPES_FILE);
        let shapes_text = read(&shapes_path)?;
        let shapes = parse_shapes(&shapes_text).map_err(|e| PopulationError::corrupt(&shapes_path, e))?;
        if shapes.is_empty() {
            return Err(PopulationError::corrupt(&shapes_path, "no shapes"));
        }
        let index_path = root.join(INDEX_FILE);
        let index = parse_index(&read(&index_path)?).map_err(|e| PopulationError::corrupt(&index_path, e))?;

        let mut population = Self {
            root,
            shapes,
            records: Vec::with_capacity(index.len()),
        };
        for entry in index {
            let record = population.load_record(&entry)?;
            population
                .check_insertable(&NewRecord::from(&record))
                .map_err(|e| PopulationError::corrupt(&index_path, e.to_string()))?;
            if entry.created_seq != population.records.len() as u64 + 1 || entry.id.value() as u64 != entry.created_seq
            {
                return Err(PopulationError::corrupt(
                    &index_path,
                    format!("record {} out of sequence", entry.id),
                ));
            }
            population.records.push(record);
        }
        Ok(population)
    }

    fn load_record(&self, entry: &IndexEntry) -> Result<KernelRecord> {
        let dir = self.record_dir(entry.id);
        let meta_path = dir.join(META_FILE);
        let meta = parse_meta(&read(&meta_path)?).map_err(|e| PopulationError::corrupt(&meta_path, e))?;
        let from_meta = IndexEntry {
            id: meta.id,
            base_parent_id: meta.base_parent_id,
            reference_parent_id: meta.reference_parent_id,
            status: meta.status,
            created_seq: meta.created_seq,
        };
        if &from_meta != entry {
            return Err(PopulationError::corrupt(
                &meta_path,
                format!("metadata disagrees with index line `{}`", entry.to_line()),
            ));
        }
        let source = read(&dir.join(SOURCE_FILE))?;
        let bench_path = dir.join(BENCHMARK_FILE);
        let benchmark = if bench_path.exists() {
            Some(parse_benchmark(&read(&bench_path)?).map_err(|e| PopulationError::corrupt(&bench_path, e))?)
        } else {
            None
        };
        Ok(KernelRecord {
            id: meta.id,
            base_parent_id: meta.base_parent_id,
            reference_parent_id: meta.reference_parent_id,
            source,
            experiment: meta.experiment,
            technique_report: meta.technique_report,
            benchmark,
            status: meta.status,
            created_seq: meta.created_seq,
            failure: meta.failure,
            generation: meta.generation,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn shapes(&self) -> &[BenchmarkShape] {
        &self.shapes
    }

    pub fn records(&self) -> &[KernelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record_dir(&self, id: RecordId) -> PathBuf {
        self.root.join(id.to_string())
    }

    pub fn get(&self, id: RecordId) -> Result<&KernelRecord> {
        // ids equal created_seq, which is the 1-based position
        self.records
            .get(id.value() as usize - 1)
            .filter(|r| r.id == id)
            .ok_or_else(|| PopulationError::UnknownId(id.to_string()))
    }

    /// Resolves a textual id against the store.
    pub fn resolve(&self, id: &str) -> Result<RecordId> {
        let parsed: RecordId = id.parse().map_err(|_| PopulationError::UnknownId(id.to_string()))?;
        self.get(parsed).map(|r| r.id)
    }

    pub fn eligible(&self) -> impl Iterator<Item = &KernelRecord> {
        self.records.iter().filter(|r| r.is_eligible())
    }

    fn check_insertable(&self, record: &NewRecord) -> Result<()> {
        let seedlike = [
            record.status == KernelStatus::Seed,
            record.base_parent_id.is_none() && record.reference_parent_id.is_none(),
            record.experiment.is_none(),
        ];
        if seedlike.iter().any(|&b| b) && !seedlike.iter().all(|&b| b) {
            return Err(PopulationError::InvalidRecord(
                "a record is a seed exactly when it has no parents and no experiment".into(),
            ));
        }
        if record.base_parent_id.is_some() != record.reference_parent_id.is_some() {
            return Err(PopulationError::InvalidRecord(
                "base and reference parents must be given together".into(),
            ));
        }
        for parent in [record.base_parent_id, record.reference_parent_id]
            .into_iter()
            .flatten()
        {
            self.get(parent).map_err(|_| PopulationError::UnknownParent(parent))?;
        }
        if record.source.trim().is_empty() {
            return Err(PopulationError::InvalidRecord("empty source".into()));
        }
        if let Some(report) = &record.benchmark {
            report.validate(&self.shapes).map_err(PopulationError::InvalidRecord)?;
        }
        if record.status == KernelStatus::Evaluated && record.benchmark.is_none() {
            return Err(PopulationError::InvalidRecord(
                "evaluated record without a benchmark".into(),
            ));
        }
        Ok(())
    }

    /// Persists a new record and returns its assigned id.
    pub fn add_record(&mut self, record: NewRecord) -> Result<RecordId> {
        self.check_insertable(&record)?;
        let seq = self.records.len() as u64 + 1;
        let id = u32::try_from(seq)
            .ok()
            .and_then(RecordId::new)
            .ok_or(PopulationError::Full)?;
        let stored = KernelRecord::from_new(id, seq, record);
        self.write_record(&stored)?;
        self.records.push(stored);
        Ok(id)
    }

    fn write_record(&self, record: &KernelRecord) -> Result<()> {
        let dir = self.record_dir(record.id);
        if dir.exists() {
            // leftover of an insert that never reached the index
            fs::remove_dir_all(&dir).map_err(|e| PopulationError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| PopulationError::io(&dir, e))?;

        let source_path = dir.join(SOURCE_FILE);
        write_atomic(&source_path, record.source.as_bytes()).map_err(|e| PopulationError::io(&source_path, e))?;

        let meta = RecordMeta {
            id: record.id,
            base_parent_id: record.base_parent_id,
            reference_parent_id: record.reference_parent_id,
            status: record.status,
            created_seq: record.created_seq,
            generation: record.generation,
            experiment: record.experiment.clone(),
            technique_report: record.technique_report.clone(),
            failure: record.failure.clone(),
        };
        let meta_path = dir.join(META_FILE);
        let meta_text =
            serde_yaml::to_string(&meta).map_err(|e| PopulationError::corrupt(&meta_path, e.to_string()))?;
        write_atomic(&meta_path, meta_text.as_bytes()).map_err(|e| PopulationError::io(&meta_path, e))?;

        if let Some(report) = &record.benchmark {
            let bench_path = dir.join(BENCHMARK_FILE);
            let text =
                serde_yaml::to_string(report).map_err(|e| PopulationError::corrupt(&bench_path, e.to_string()))?;
            write_atomic(&bench_path, text.as_bytes()).map_err(|e| PopulationError::io(&bench_path, e))?;
        }

        let index_path = self.root.join(INDEX_FILE);
        let line = IndexEntry {
            id: record.id,
            base_parent_id: record.base_parent_id,
            reference_parent_id: record.reference_parent_id,
            status: record.status,
            created_seq: record.created_seq,
        }
        .to_line();
        let mut index = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&index_path)
            .map_err(|e| PopulationError::io(&index_path, e))?;
        writeln!(index, "{line}").map_err(|e| PopulationError::io(&index_path, e))?;
        index.sync_data().map_err(|e| PopulationError::io(&index_path, e))?;
        Ok(())
    }

    /// Directory for a record's stage transcripts (created on demand).
    pub fn transcripts_dir(&self, id: RecordId) -> Result<PathBuf> {
        self.get(id)?;
        let dir = self.record_dir(id).join(TRANSCRIPTS_DIR);
        fs::create_dir_all(&dir).map_err(|e| PopulationError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn summarize(&self) -> PopulationSummary {
        PopulationSummary::from_records(&self.shapes, &self.records)
    }

    /// The experiment that produced `id`, its technique report, and the
    /// benchmarks of its base parent and of itself.
    pub fn one_step_analysis(&self, id: RecordId) -> Result<String> {
        let record = self.get(id)?;
        let mut out = format!("### One-step experiment analysis for kernel {id}\n\n");
        match (&record.experiment, record.base_parent_id) {
            (Some(plan), Some(base_id)) => {
                let base = self.get(base_id)?;
                out.push_str(&format!(
                    "Produced from base {base_id} (reference {}).\n\n",
                    record
                        .reference_parent_id
                        .map_or_else(|| "-".to_string(), |r| r.to_string())
                ));
                out.push_str(&format!("Experiment description:\n{}\n\n", plan.description));
                out.push_str(&format!("Experiment rubric:\n{}\n\n", plan.rubric));
                if let Some(report) = &record.technique_report {
                    out.push_str(&format!("Techniques reported by the writer:\n{report}\n\n"));
                }
                out.push_str(&format!("Benchmark of base parent {base_id}:\n"));
                out.push_str(&benchmark_block(base));
                out.push('\n');
            }
            _ => out.push_str("seed kernel, no prior experiment.\n\n"),
        }
        out.push_str(&format!("Benchmark of kernel {id}:\n"));
        out.push_str(&benchmark_block(record));
        Ok(out)
    }

    /// The eligible record with the lowest aggregate score; ties go to the
    /// earliest record.
    pub fn best_record(&self) -> Result<RecordId> {
        self.records
            .iter()
            .filter_map(|r| r.aggregate_score().map(|s| (s, r)))
            .fold(None::<(f64, &KernelRecord)>, |best, (score, r)| match best {
                Some((b, _)) if b <= score => best,
                _ => Some((score, r)),
            })
            .map(|(_, r)| r.id)
            .ok_or(PopulationError::NoEvaluatedRecords)
    }

    /// Base-parent chain from `id` back to its seed, starting with `id`.
    pub fn lineage(&self, id: RecordId) -> Result<Vec<RecordId>> {
        let mut chain = vec![id];
        let mut current = self.get(id)?;
        while let Some(parent) = current.base_parent_id {
            chain.push(parent);
            current = self.get(parent)?;
        }
        Ok(chain)
    }
}

fn benchmark_block(record: &KernelRecord) -> String {
    match (&record.benchmark, record.status.is_failure()) {
        (Some(report), false) => report.render_table(),
        _ => {
            let mut s = format!("{FAILURE_MARKER} ({})\n", record.status);
            if let Some(detail) = &record.failure {
                s.push_str(&format!("detail: {}\n", first_lines(detail, 20)));
            }
            if let Some(report) = &record.benchmark {
                s.push_str(&report.render_table());
            }
            s
        }
    }
}

fn first_lines(text: &str, n: usize) -> String {
    text.lines().take(n).collect::<Vec<_>>().join("\n")
}

fn shape_list(shapes: &[BenchmarkShape]) -> String {
    shapes.iter().map(BenchmarkShape::label).collect::<Vec<_>>().join(",")
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PopulationError::io(path, e))
}

#[cfg(test)]
mod tests;
