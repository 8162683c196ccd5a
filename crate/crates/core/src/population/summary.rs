use std::fmt::Write;

use super::record::{BenchmarkShape, KernelRecord, KernelStatus, RecordId};

/// Shown in place of timings for kernels that failed to build, gave wrong
/// results, or could not be evaluated.
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq)]
pub enum RowTimings {
    Measured(Vec<f64>),
    /// Failed evaluation; rendered as [`FAILURE_MARKER`].
    Failed,
    /// Not benchmarked yet; rendered as `-`.
    Unmeasured,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub id: RecordId,
    pub base_parent_id: Option<RecordId>,
    pub reference_parent_id: Option<RecordId>,
    pub status: KernelStatus,
    pub timings: RowTimings,
    pub aggregate_score: Option<f64>,
}

/// Tabular view of the population, one row per record in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSummary {
    pub shapes: Vec<BenchmarkShape>,
    pub rows: Vec<SummaryRow>,
}

impl PopulationSummary {
    pub fn from_records(shapes: &[BenchmarkShape], records: &[KernelRecord]) -> Self {
        let rows = records
            .iter()
            .map(|r| {
                let aggregate_score = r.aggregate_score();
                let timings = match (&r.benchmark, aggregate_score) {
                    (Some(report), Some(_)) => {
                        RowTimings::Measured(report.entries.iter().map(|e| e.mean_time_us).collect())
                    }
                    _ if r.status.is_failure() || r.failure.is_some() => RowTimings::Failed,
                    _ => RowTimings::Unmeasured,
                };
                SummaryRow {
                    id: r.id,
                    base_parent_id: r.base_parent_id,
                    reference_parent_id: r.reference_parent_id,
                    status: r.status,
                    timings,
                    aggregate_score,
                }
            })
            .collect();
        Self {
            shapes: shapes.to_vec(),
            rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Markdown table: id, parents, status, one column per shape (µs), and
    /// the geometric-mean aggregate.
    pub fn render_table(&self) -> String {
        let mut out = String::from("| id | base | reference | status |");
        for shape in &self.shapes {
            let _ = write!(out, " {} |", shape.label());
        }
        out.push_str(" aggregate |\n|---|---|---|---|");
        for _ in &self.shapes {
            out.push_str("---|");
        }
        out.push_str("---|\n");

        let dash = |id: Option<RecordId>| id.map_or_else(|| "-".to_string(), |i| i.to_string());
        for row in &self.rows {
            let _ = write!(
                out,
                "| {} | {} | {} | {} |",
                row.id,
                dash(row.base_parent_id),
                dash(row.reference_parent_id),
                row.status
            );
            match &row.timings {
                RowTimings::Measured(times) => {
                    for t in times {
                        let _ = write!(out, " {t:.3} |");
                    }
                }
                RowTimings::Failed | RowTimings::Unmeasured => {
                    let cell = if row.timings == RowTimings::Failed {
                        FAILURE_MARKER
                    } else {
                        "-"
                    };
                    for _ in &self.shapes {
                        let _ = write!(out, " {cell} |");
                    }
                }
            }
            match row.aggregate_score {
                Some(score) => {
                    let _ = writeln!(out, " {score:.3} |");
                }
                None => out.push_str(" - |\n"),
            }
        }
        out
    }
}
