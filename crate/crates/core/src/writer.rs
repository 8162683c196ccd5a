//! Kernel writing: the writer model receives the task, findings, both
//! parent listings with their one-step analyses, and the experiment rubric,
//! and returns a complete new kernel plus a report on the techniques used.

use std::fmt::Write;

use crate::designer::{fence_listing, ExperimentPlan};
use crate::gateway::{Gateway, GatewayError, Parsed, RoleName};
use crate::knowledge::KnowledgeDoc;
use crate::population::{Population, PopulationError, RecordId};
use crate::selector::SelectionDecision;
use crate::textdoc::fenced_blocks;

#[derive(Debug, Clone, PartialEq)]
pub struct WriterContext {
    pub task_description: String,
    pub findings: Vec<KnowledgeDoc>,
    pub base_id: RecordId,
    pub reference_id: RecordId,
    pub base_listing: String,
    pub reference_listing: String,
    pub base_analysis: String,
    pub reference_analysis: String,
    pub plan: ExperimentPlan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelCandidate {
    pub source: String,
    pub technique_report: String,
}

#[derive(Debug, thiserror::Error)]
pub enum WriterError {
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error("incomplete writer context: {0}")]
    IncompleteContext(&'static str),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl WriterContext {
    pub fn validate(&self) -> Result<(), WriterError> {
        let fields = [
            (&self.task_description, "task description"),
            (&self.base_listing, "base listing"),
            (&self.reference_listing, "reference listing"),
            (&self.base_analysis, "base analysis"),
            (&self.reference_analysis, "reference analysis"),
            (&self.plan.description, "plan description"),
            (&self.plan.rubric, "plan rubric"),
        ];
        for (value, name) in fields {
            if value.trim().is_empty() {
                return Err(WriterError::IncompleteContext(name));
            }
        }
        Ok(())
    }
}

pub fn assemble_writer_context(
    decision: &SelectionDecision,
    plan: &ExperimentPlan,
    population: &Population,
    knowledge: &[KnowledgeDoc],
    task_description: &str,
) -> Result<WriterContext, WriterError> {
    let base = population.get(decision.basis_code)?;
    let reference = population.get(decision.basis_reference)?;
    let context = WriterContext {
        task_description: task_description.to_string(),
        findings: knowledge.to_vec(),
        base_id: base.id,
        reference_id: reference.id,
        base_listing: base.source.clone(),
        reference_listing: reference.source.clone(),
        base_analysis: population.one_step_analysis(base.id)?,
        reference_analysis: population.one_step_analysis(reference.id)?,
        plan: plan.clone(),
    };
    context.validate()?;
    Ok(context)
}

pub fn render_writer_prompt(ctx: &WriterContext) -> String {
    let mut p = String::from(
        "You are the kernel writer of an automated GPU kernel optimization loop. Your job is \
         to implement one experiment by modifying the Base kernel.\n\n",
    );
    let _ = write!(p, "# Task\n\n{}\n\n", ctx.task_description.trim_end());
    p.push_str("# Findings\n\n");
    if ctx.findings.is_empty() {
        p.push_str("(no findings documents)\n\n");
    }
    for doc in &ctx.findings {
        let _ = write!(p, "## {}\n\n{}\n\n", doc.title, doc.body.trim_end());
    }
    let _ = write!(
        p,
        "# Reference kernel {}\n\nProvided for contrast and analysis; do not edit it.\n\n{}\n{}\n",
        ctx.reference_id,
        fence_listing(&ctx.reference_listing),
        ctx.reference_analysis.trim_end()
    );
    let _ = write!(
        p,
        "\n# Base kernel {}\n\nYour new kernel must start from this code.\n\n{}\n{}\n",
        ctx.base_id,
        fence_listing(&ctx.base_listing),
        ctx.base_analysis.trim_end()
    );
    let _ = write!(
        p,
        "\n# Experiment\n\nDescription:\n{}\n\nRubric:\n{}\n\n",
        ctx.plan.description.trim_end(),
        ctx.plan.rubric.trim_end()
    );
    p.push_str(
        "# Output format\n\n\
         1. The complete new kernel source file (including host-side calling code) in a single \
         fenced code block. Do not send a diff or a fragment.\n\
         2. After the code block, a section headed `## Technique Report` that briefly states \
         which techniques you actually used, and which parts of the rubric you did not follow \
         and why.\n",
    );
    p
}

/// Splits a writer response into kernel source and technique report. The
/// source is the largest fenced block (the later one on equal size); the
/// report is the prose after a "technique" label, or all prose outside
/// code blocks when no label is present.
pub fn parse_kernel_output(text: &str) -> Result<KernelCandidate, String> {
    let text = text.replace("\r\n", "\n");
    let blocks = fenced_blocks(&text)?;
    let source = blocks
        .iter()
        .max_by_key(|b| b.content.trim().len())
        .ok_or("no fenced code block with the kernel source found")?;
    if source.content.trim().is_empty() {
        return Err("the kernel source block is empty".into());
    }

    let lines: Vec<&str> = text.lines().collect();
    let inside = |i: usize| blocks.iter().any(|b| (b.start_line..=b.end_line).contains(&i));
    let prose: Vec<(usize, &str)> = lines
        .iter()
        .enumerate()
        .filter(|(i, _)| !inside(*i))
        .map(|(i, l)| (i, *l))
        .collect();

    let label = prose.iter().position(|(_, l)| is_report_label(l));
    let report_lines: Vec<String> = match label {
        Some(pos) => {
            let (_, label_line) = prose[pos];
            let tail = label_line
                .split_once(':')
                .map(|(_, t)| t.trim().trim_start_matches("**").trim().to_string())
                .filter(|t| !t.is_empty() && !label_line.trim_start().starts_with('#'));
            tail.into_iter()
                .chain(prose[pos + 1..].iter().map(|(_, l)| l.to_string()))
                .collect()
        }
        None => prose.iter().map(|(_, l)| l.to_string()).collect(),
    };
    let report = report_lines.join("\n").trim().to_string();
    if report.is_empty() {
        return Err("technique report is missing or empty; add a `## Technique Report` section".into());
    }
    Ok(KernelCandidate {
        source: source.content.clone(),
        technique_report: report,
    })
}

fn is_report_label(line: &str) -> bool {
    let t = line.trim();
    let lower = t.to_ascii_lowercase();
    if !lower.contains("technique") {
        return false;
    }
    t.starts_with('#') || t.starts_with("**") || lower.starts_with("technique")
}

/// Runs one writer call on lane `lane` (e.g. `writer-2`).
pub fn write_kernel(
    gateway: &Gateway,
    lane: &str,
    ctx: &WriterContext,
) -> Result<Parsed<KernelCandidate>, WriterError> {
    ctx.validate()?;
    let prompt = render_writer_prompt(ctx);
    Ok(gateway.complete_structured(RoleName::Writer, lane, &prompt, parse_kernel_output)?)
}
