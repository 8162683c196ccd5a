use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::designer::ExperimentPlan;

/// Largest id representable in the five-digit format.
pub const MAX_RECORD_ID: u32 = 99_999;

/// Identifier of a population individual, rendered as a zero-padded
/// five-digit decimal string ("00052").
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId(u32);

impl RecordId {
    pub fn new(value: u32) -> Option<Self> {
        (1..=MAX_RECORD_ID).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:05}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid record id {0:?}: expected 1 to 5 decimal digits")]
pub struct InvalidRecordId(pub String);

impl FromStr for RecordId {
    type Err = InvalidRecordId;

    /// Accepts one to five ASCII digits; shorter forms are treated as
    /// unpadded ("52" == "00052").
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.is_empty() || t.len() > 5 || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(InvalidRecordId(s.to_string()));
        }
        t.parse::<u32>()
            .ok()
            .and_then(RecordId::new)
            .ok_or_else(|| InvalidRecordId(s.to_string()))
    }
}

impl Serialize for RecordId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RecordId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelStatus {
    Seed,
    Pending,
    Evaluated,
    BuildFailed,
    Incorrect,
    EvalError,
}

impl KernelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelStatus::Seed => "seed",
            KernelStatus::Pending => "pending",
            KernelStatus::Evaluated => "evaluated",
            KernelStatus::BuildFailed => "build_failed",
            KernelStatus::Incorrect => "incorrect",
            KernelStatus::EvalError => "eval_error",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(
            self,
            KernelStatus::BuildFailed | KernelStatus::Incorrect | KernelStatus::EvalError
        )
    }
}

impl fmt::Display for KernelStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "seed" => KernelStatus::Seed,
            "pending" => KernelStatus::Pending,
            "evaluated" => KernelStatus::Evaluated,
            "build_failed" => KernelStatus::BuildFailed,
            "incorrect" => KernelStatus::Incorrect,
            "eval_error" => KernelStatus::EvalError,
            other => return Err(format!("unknown status {other:?}")),
        })
    }
}

/// One M×K×N benchmark configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BenchmarkShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
}

impl BenchmarkShape {
    pub fn new(m: u64, k: u64, n: u64) -> Result<Self, String> {
        let shape = Self { m, k, n };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(format!("benchmark shape {self} has a zero dimension"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}x{}x{}", self.m, self.k, self.n)
    }
}

impl fmt::Display for BenchmarkShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={}, k={}, n={}", self.m, self.k, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub shape: BenchmarkShape,
    pub mean_time_us: f64,
    pub correct: bool,
}

/// Per-shape timings for one kernel, in configured shape order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub entries: Vec<BenchmarkEntry>,
    pub evaluated_at: DateTime<Utc>,
}

impl BenchmarkReport {
    /// Checks that the entries cover exactly `shapes`, in order, with
    /// positive finite timings.
    pub fn validate(&self, shapes: &[BenchmarkShape]) -> Result<(), String> {
        if self.entries.len() != shapes.len() {
            return Err(format!(
                "benchmark has {} entries, expected {}",
                self.entries.len(),
                shapes.len()
            ));
        }
        for (entry, shape) in self.entries.iter().zip(shapes) {
            if entry.shape != *shape {
                return Err(format!(
                    "benchmark entry for {} where {} was expected",
                    entry.shape.label(),
                    shape.label()
                ));
            }
            if !(entry.mean_time_us.is_finite() && entry.mean_time_us > 0.0) {
                return Err(format!(
                    "benchmark entry for {} has non-positive time {}",
                    shape.label(),
                    entry.mean_time_us
                ));
            }
        }
        Ok(())
    }

    pub fn all_correct(&self) -> bool {
        self.entries.iter().all(|e| e.correct)
    }

    /// Geometric mean of the per-shape mean times; lower is better.
    pub fn aggregate_score(&self) -> f64 {
        geometric_mean(self.entries.iter().map(|e| e.mean_time_us))
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("| shape (MxKxN) | mean time (us) | correct |\n|---|---|---|\n");
        for entry in &self.entries {
            out.push_str(&format!(
                "| {} | {:.3} | {} |\n",
                entry.shape.label(),
                entry.mean_time_us,
                if entry.correct { "yes" } else { "no" }
            ));
        }
        out.push_str(&format!(
            "aggregate (geometric mean): {:.3} us\n",
            self.aggregate_score()
        ));
        out
    }
}

pub fn geometric_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .into_iter()
        .fold((0.0_f64, 0usize), |(s, c), v| (s + v.ln(), c + 1));
    if count == 0 {
        return f64::NAN;
    }
    (sum / count as f64).exp()
}

/// One individual of the population.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRecord {
    pub id: RecordId,
    pub base_parent_id: Option<RecordId>,
    pub reference_parent_id: Option<RecordId>,
    pub source: String,
    pub experiment: Option<ExperimentPlan>,
    pub technique_report: Option<String>,
    pub benchmark: Option<BenchmarkReport>,
    pub status: KernelStatus,
    pub created_seq: u64,
    /// Failure detail (build log, incorrect shapes, diagnostic).
    pub failure: Option<String>,
    /// Generation that produced this record; `None` for seeds.
    pub generation: Option<u32>,
}

impl KernelRecord {
    pub(crate) fn from_new(id: RecordId, created_seq: u64, record: NewRecord) -> Self {
        Self {
            id,
            base_parent_id: record.base_parent_id,
            reference_parent_id: record.reference_parent_id,
            source: record.source,
            experiment: record.experiment,
            technique_report: record.technique_report,
            benchmark: record.benchmark,
            status: record.status,
            created_seq,
            failure: record.failure,
            generation: record.generation,
        }
    }

    pub fn is_seed(&self) -> bool {
        self.status == KernelStatus::Seed
    }

    /// Eligible as Base or Reference: a successfully benchmarked seed or
    /// evaluated child.
    pub fn is_eligible(&self) -> bool {
        matches!(self.status, KernelStatus::Seed | KernelStatus::Evaluated)
            && self.benchmark.as_ref().is_some_and(|b| b.all_correct())
    }

    pub fn aggregate_score(&self) -> Option<f64> {
        if self.is_eligible() {
            self.benchmark.as_ref().map(BenchmarkReport::aggregate_score)
        } else {
            None
        }
    }
}

/// A record before insertion; the store assigns id and `created_seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct NewRecord {
    pub base_parent_id: Option<RecordId>,
    pub reference_parent_id: Option<RecordId>,
    pub source: String,
    pub experiment: Option<ExperimentPlan>,
    pub technique_report: Option<String>,
    pub benchmark: Option<BenchmarkReport>,
    pub status: KernelStatus,
    pub failure: Option<String>,
    pub generation: Option<u32>,
}

impl NewRecord {
    pub fn seed(source: impl Into<String>) -> Self {
        Self {
            base_parent_id: None,
            reference_parent_id: None,
            source: source.into(),
            experiment: None,
            technique_report: None,
            benchmark: None,
            status: KernelStatus::Seed,
            failure: None,
            generation: None,
        }
    }

    pub fn child(base: RecordId, reference: RecordId, source: impl Into<String>, experiment: ExperimentPlan) -> Self {
        Self {
            base_parent_id: Some(base),
            reference_parent_id: Some(reference),
            source: source.into(),
            experiment: Some(experiment),
            technique_report: None,
            benchmark: None,
            status: KernelStatus::Pending,
            failure: None,
            generation: None,
        }
    }
}

impl From<&KernelRecord> for NewRecord {
    fn from(r: &KernelRecord) -> Self {
        Self {
            base_parent_id: r.base_parent_id,
            reference_parent_id: r.reference_parent_id,
            source: r.source.clone(),
            experiment: r.experiment.clone(),
            technique_report: r.technique_report.clone(),
            benchmark: r.benchmark.clone(),
            status: r.status,
            failure: r.failure.clone(),
            generation: r.generation,
        }
    }
}
