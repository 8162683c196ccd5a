//! Experiment design: ten avenues and five plans from the designer model,
//! then a deterministic choice of three plans.

use std::cmp::Ordering;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::gateway::{Gateway, GatewayError, Parsed, RoleName};
use crate::knowledge::KnowledgeDoc;
use crate::population::KernelRecord;
use crate::textdoc::{block_scalar, clean_text, fenced_blocks, scalar_number, scalar_string, yaml_region};

pub const AVENUE_COUNT: usize = 10;
pub const PLAN_COUNT: usize = 5;
pub const PICK_COUNT: usize = 3;

/// Estimated percent improvement range `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PerformanceRange {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for PerformanceRange {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<PerformanceRange> for [f64; 2] {
    fn from(r: PerformanceRange) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// 1-based position in the designer's output.
    pub ordinal: u8,
    pub description: String,
    pub rubric: String,
    pub performance: PerformanceRange,
    pub innovation: f64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), String> {
        let n = self.ordinal;
        if self.description.trim().is_empty() {
            return Err(format!("plan {n}: empty description"));
        }
        if self.rubric.trim().is_empty() {
            return Err(format!("plan {n}: empty rubric"));
        }
        let PerformanceRange { lo, hi } = self.performance;
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(format!("plan {n}: performance bounds must be finite"));
        }
        if lo > hi {
            return Err(format!("plan {n}: performance range [{lo}, {hi}] has lo > hi"));
        }
        if !(0.0..=100.0).contains(&self.innovation) {
            return Err(format!("plan {n}: innovation {} is outside [0, 100]", self.innovation));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub avenues: Vec<String>,
    pub plans: Vec<ExperimentPlan>,
}

#[derive(Debug, thiserror::Error)]
pub enum DesignError {
    #[error("base kernel has empty source")]
    EmptySource,
    #[error("expected exactly {PLAN_COUNT} plans, got {0}")]
    WrongCount(usize),
    #[error("invalid plan set: {0}")]
    InvalidPlans(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Parses a designer response: a list of avenues followed by a YAML block
/// with an `experiment:` sequence of plans.
pub fn parse_design(text: &str) -> Result<DesignOutput, String> {
    let text = text.replace("\r\n", "\n");
    let (yaml, plans_start) = plans_yaml(&text)?;
    let avenues = parse_avenues(&text, plans_start);
    if avenues.len() != AVENUE_COUNT {
        return Err(format!(
            "expected exactly {AVENUE_COUNT} avenues as bullet points, found {}",
            avenues.len()
        ));
    }
    let items = plan_items(&yaml)?;
    if items.len() != PLAN_COUNT {
        return Err(format!(
            "expected exactly {PLAN_COUNT} experiment plans, found {}",
            items.len()
        ));
    }
    let plans = items
        .iter()
        .enumerate()
        .map(|(i, item)| parse_plan(item, i as u8 + 1))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DesignOutput { avenues, plans })
}

/// Parses every plan entry of a possibly truncated designer response,
/// without enforcing the plan count. Entries that are not mappings (such as
/// an elided `- ...` line) are skipped; malformed mappings are errors.
pub fn parse_plan_entries(text: &str) -> Result<Vec<ExperimentPlan>, String> {
    let text = text.replace("\r\n", "\n");
    let yaml = match plans_yaml(&text) {
        Ok((yaml, _)) => yaml,
        Err(_) => {
            yaml_region(&text, &["experiment", "experiments"])
                .ok_or("no `experiment:` plan block found")?
                .1
        }
    };
    plan_items(&yaml)?
        .iter()
        .filter(|item| item.is_mapping())
        .enumerate()
        .map(|(i, item)| parse_plan(item, i as u8 + 1))
        .collect()
}

fn plan_items(yaml: &str) -> Result<Vec<Value>, String> {
    let doc: Value = serde_yaml::from_str(yaml).map_err(|e| format!("plan block is not valid YAML: {e}"))?;
    doc.get("experiment")
        .or_else(|| doc.get("experiments"))
        .or(Some(&doc))
        .and_then(Value::as_sequence)
        .cloned()
        .ok_or_else(|| "plan block must contain an `experiment:` list".to_string())
}

/// Locates the plan YAML and the line where it starts.
fn plans_yaml(text: &str) -> Result<(String, usize), String> {
    const KEYS: [&str; 2] = ["experiment", "experiments"];
    for block in fenced_blocks(text)? {
        if let Some((_, region)) = yaml_region(&block.content, &KEYS) {
            return Ok((region, block.start_line));
        }
    }
    let (start, region) = yaml_region(text, &KEYS).ok_or("no `experiment:` plan block found")?;
    Ok((region, start))
}

fn parse_avenues(text: &str, plans_start: usize) -> Vec<String> {
    let lines: Vec<&str> = text.lines().take(plans_start).collect();
    let is_heading = |l: &str, needle: &str| {
        let t = l.trim().to_ascii_lowercase();
        (t.starts_with('#') || t.starts_with("**")) && t.contains(needle)
    };
    let from = lines
        .iter()
        .position(|l| is_heading(l, "task 1") || is_heading(l, "avenue"))
        .map_or(0, |i| i + 1);
    let to = lines
        .iter()
        .skip(from)
        .position(|l| is_heading(l, "task 2"))
        .map_or(lines.len(), |i| i + from);
    lines[from..to].iter().filter_map(|l| bullet_text(l)).collect()
}

fn bullet_text(line: &str) -> Option<String> {
    let t = line.trim_start();
    let rest = if let Some(r) = t
        .strip_prefix("* ")
        .or_else(|| t.strip_prefix("- "))
        .or_else(|| t.strip_prefix("+ "))
    {
        r
    } else {
        let digits = t.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        t[digits..]
            .strip_prefix(". ")
            .or_else(|| t[digits..].strip_prefix(") "))?
    };
    let rest = rest.trim();
    (!rest.is_empty()).then(|| rest.to_string())
}

fn parse_plan(item: &Value, ordinal: u8) -> Result<ExperimentPlan, String> {
    let field = |name: &str| item.get(name).ok_or(format!("plan {ordinal}: missing field `{name}`"));
    let text_field = |name: &str| -> Result<String, String> {
        let v = field(name)?;
        let s = match v {
            Value::Sequence(lines) => lines
                .iter()
                .map(|l| scalar_string(l).map(|s| clean_text(&s)))
                .collect::<Option<Vec<_>>>()
                .map(|v| v.join("\n")),
            other => scalar_string(other).map(|s| clean_text(&s)),
        }
        .ok_or(format!("plan {ordinal}: `{name}` must be text"))?;
        if s.is_empty() {
            return Err(format!("plan {ordinal}: `{name}` is empty"));
        }
        Ok(s)
    };
    let description = text_field("description")?;
    let rubric = text_field("rubric")?;
    let performance = match field("performance")? {
        Value::Sequence(pair) if pair.len() == 2 => {
            let lo = scalar_number(&pair[0]);
            let hi = scalar_number(&pair[1]);
            match (lo, hi) {
                (Some(lo), Some(hi)) => PerformanceRange { lo, hi },
                _ => return Err(format!("plan {ordinal}: `performance` bounds must be numbers")),
            }
        }
        _ => return Err(format!("plan {ordinal}: `performance` must be a [lo, hi] pair")),
    };
    let innovation =
        scalar_number(field("innovation")?).ok_or(format!("plan {ordinal}: `innovation` must be a number"))?;
    let plan = ExperimentPlan {
        ordinal,
        description,
        rubric,
        performance,
        innovation,
    };
    plan.validate()?;
    Ok(plan)
}

/// Renders a design in the same document shape the designer is asked to
/// produce; [`parse_design`] reads it back.
pub fn render_design(design: &DesignOutput) -> String {
    let mut out = String::from("## Task 1: Optimization Avenues\n\n");
    for avenue in &design.avenues {
        let _ = writeln!(out, "* {avenue}");
    }
    out.push_str("\n## Task 2: Experiments\n\n```yaml\nexperiment:\n");
    for plan in &design.plans {
        let _ = write!(out, "  - description: {}", block_scalar(&plan.description, 6));
        let _ = write!(out, "    rubric: {}", block_scalar(&plan.rubric, 6));
        let _ = writeln!(
            out,
            "    performance: [{}, {}]",
            yaml_number(plan.performance.lo),
            yaml_number(plan.performance.hi)
        );
        let _ = writeln!(out, "    innovation: {}", yaml_number(plan.innovation));
    }
    out.push_str("```\n");
    out
}

fn yaml_number(v: f64) -> String {
    // `{:?}` keeps a round-trippable representation (15.0, 0.1, 1e-7)
    format!("{v:?}")
}

fn argmax_by<'a>(plans: &[&'a ExperimentPlan], key: impl Fn(&ExperimentPlan) -> f64) -> &'a ExperimentPlan {
    plans
        .iter()
        .copied()
        .max_by(|a, b| {
            key(a)
                .partial_cmp(&key(b))
                .unwrap_or(Ordering::Equal)
                // smaller ordinal wins ties
                .then_with(|| b.ordinal.cmp(&a.ordinal))
        })
        .expect("non-empty plan set")
}

/// Chooses three of five plans without replacement: the most innovative,
/// then the highest upper gain estimate, then the highest lower gain
/// estimate. Ties go to the smaller ordinal.
pub fn pick_experiments(plans: &[ExperimentPlan]) -> Result<Vec<ExperimentPlan>, DesignError> {
    if plans.len() != PLAN_COUNT {
        return Err(DesignError::WrongCount(plans.len()));
    }
    for plan in plans {
        plan.validate().map_err(DesignError::InvalidPlans)?;
    }
    let mut ordinals: Vec<u8> = plans.iter().map(|p| p.ordinal).collect();
    ordinals.sort_unstable();
    ordinals.dedup();
    if ordinals.len() != plans.len() {
        return Err(DesignError::InvalidPlans("duplicate ordinals".into()));
    }

    let mut remaining: Vec<&ExperimentPlan> = plans.iter().collect();
    let criteria: [fn(&ExperimentPlan) -> f64; PICK_COUNT] =
        [|p| p.innovation, |p| p.performance.hi, |p| p.performance.lo];
    let mut picks = Vec::with_capacity(PICK_COUNT);
    for key in criteria {
        let chosen = argmax_by(&remaining, key);
        remaining.retain(|p| p.ordinal != chosen.ordinal);
        picks.push(chosen.clone());
    }
    Ok(picks)
}

/// Designer prompt: the Base listing, every knowledge document, and the
/// two-part instruction.
pub fn build_designer_prompt(base: &KernelRecord, knowledge: &[KnowledgeDoc]) -> Result<String, DesignError> {
    if base.source.trim().is_empty() {
        return Err(DesignError::EmptySource);
    }
    let mut p = String::new();
    p.push_str(
        "You are the experiment designer of an automated GPU kernel optimization loop. \
         The kernel below (the Base) was chosen as the starting point for the next round \
         of experiments. The only feedback available is end-to-end benchmark timing, so \
         experiments should be designed so their effect can be read from timings.\n\n",
    );
    let _ = writeln!(p, "# Base kernel {}\n", base.id);
    p.push_str(&fence_listing(&base.source));
    p.push_str("\n# External notes\n\n");
    if knowledge.is_empty() {
        p.push_str("(no external notes available)\n\n");
    }
    for doc in knowledge {
        let _ = writeln!(p, "## {} [{}]\n\n{}\n", doc.title, doc.doc_id, doc.body.trim_end());
    }
    let _ = write!(
        p,
        "# Instructions\n\n\
         ## Task 1: Optimization Avenues\n\
         List exactly {AVENUE_COUNT} avenues that might be worth experimenting with, one per \
         bullet point (`* ...`). Cast the net wide; these are for ideation.\n\n\
         ## Task 2: Experiments\n\
         Then write exactly {PLAN_COUNT} concrete experiment plans as a fenced ```yaml block \
         with this shape:\n\n\
         ```yaml\n\
         experiment:\n  \
           - description: >\n      \"What the experiment changes and why.\"\n    \
             rubric: >\n      \"Concrete, line-by-line directives for the kernel writer.\"\n    \
             performance: [lo, hi]\n    \
             innovation: 0-100\n\
         ```\n\n\
         `performance` is your estimated range of percent improvement over the Base \
         (lo <= hi). `innovation` scores how novel the experiment is, from 0 to 100.\n"
    );
    Ok(p)
}

/// Wraps a listing in a code fence longer than any backtick run inside it.
pub(crate) fn fence_listing(source: &str) -> String {
    let mut ticks = 3;
    while source.contains(&"`".repeat(ticks)) {
        ticks += 1;
    }
    let t = "`".repeat(ticks);
    let nl = if source.ends_with('\n') { "" } else { "\n" };
    format!("{t}\n{source}{nl}{t}\n")
}

#[derive(Debug, Clone)]
pub struct Designed {
    pub output: DesignOutput,
    pub chosen: Vec<ExperimentPlan>,
    pub attempts: u32,
}

/// Runs the designer model and applies [`pick_experiments`].
pub fn design_experiments(
    gateway: &Gateway,
    base: &KernelRecord,
    knowledge: &[KnowledgeDoc],
) -> Result<Designed, DesignError> {
    let prompt = build_designer_prompt(base, knowledge)?;
    let Parsed {
        value: output,
        attempts,
    } = gateway.complete_structured(RoleName::Designer, "designer", &prompt, parse_design)?;
    let chosen = pick_experiments(&output.plans)?;
    Ok(Designed {
        output,
        chosen,
        attempts,
    })
}
