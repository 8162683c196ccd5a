//! Parent selection: the selector model reads the population table and
//! names a Base and a Reference kernel.

use std::fmt::Write;

use serde_yaml::Value;

use crate::gateway::{Gateway, GatewayError, Parsed, RoleName};
use crate::population::{Population, PopulationSummary, RecordId, FAILURE_MARKER};
use crate::textdoc::{block_scalar, clean_text, fenced_blocks, scalar_string, yaml_region};

const KEYS: [&str; 3] = ["basis_code", "basis_reference", "rationale"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionDecision {
    pub basis_code: RecordId,
    pub basis_reference: RecordId,
    pub rationale: String,
}

impl SelectionDecision {
    /// Base and Reference are the same kernel (single-record bootstrap).
    pub fn is_degenerate(&self) -> bool {
        self.basis_code == self.basis_reference
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("population has no eligible (successfully evaluated) records")]
    EmptyPopulation,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Extracts a decision document from a selector response, tolerating
/// surrounding prose and code fences.
pub fn parse_selection(text: &str) -> Result<SelectionDecision, String> {
    let text = text.replace("\r\n", "\n");
    let mut candidates: Vec<String> = fenced_blocks(&text)
        .unwrap_or_default()
        .into_iter()
        .map(|b| b.content)
        .collect();
    candidates.push(text);

    let mut first_error = None;
    for candidate in &candidates {
        let Some((_, region)) = yaml_region(candidate, &KEYS) else {
            continue;
        };
        match decision_from_yaml(&region) {
            Ok(d) => return Ok(d),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or_else(|| {
        "no decision document found; expected `basis_code:`, `basis_reference:` and `rationale:` fields".into()
    }))
}

fn decision_from_yaml(doc: &str) -> Result<SelectionDecision, String> {
    let value: Value = serde_yaml::from_str(doc).map_err(|e| format!("decision document is not valid YAML: {e}"))?;
    if !value.is_mapping() {
        return Err("decision document must be a key-value mapping".into());
    }
    let id = |key: &str| -> Result<RecordId, String> {
        let v = value.get(key).ok_or(format!("missing field `{key}`"))?;
        let raw = match v {
            Value::Number(n) => n.as_u64().map(|n| n.to_string()),
            other => scalar_string(other).map(|s| clean_text(&s)),
        }
        .ok_or(format!("`{key}` must be a kernel id"))?;
        raw.parse::<RecordId>().map_err(|e| format!("`{key}`: {e}"))
    };
    let basis_code = id("basis_code")?;
    let basis_reference = id("basis_reference")?;
    let rationale = value.get("rationale").ok_or("missing field `rationale`")?;
    let rationale = scalar_string(rationale)
        .map(|s| clean_text(&s))
        .ok_or("`rationale` must be text")?;
    if rationale.is_empty() {
        return Err("`rationale` is empty".into());
    }
    Ok(SelectionDecision {
        basis_code,
        basis_reference,
        rationale,
    })
}

/// Renders a decision in the document shape the selector produces.
pub fn render_selection(decision: &SelectionDecision) -> String {
    format!(
        "basis_code: \"{}\"\nbasis_reference: \"{}\"\nrationale: {}",
        decision.basis_code,
        decision.basis_reference,
        block_scalar(&decision.rationale, 2)
    )
}

pub fn build_selector_prompt(summary: &PopulationSummary) -> Result<String, SelectorError> {
    if summary.is_empty() {
        return Err(SelectorError::EmptyPopulation);
    }
    let mut p = String::from(
        "You are the evolutionary selector of an automated GPU kernel optimization loop.\n\n\
         Below is the full population of kernels tried so far. Each row gives the kernel id, \
         the ids of its Base and Reference parents (`-` for seed kernels), its status, and its \
         mean running time in microseconds for each benchmark configuration (MxKxN). Lower \
         times are better. The aggregate column is the geometric mean over configurations.\n",
    );
    let _ = writeln!(
        p,
        "Rows marked {FAILURE_MARKER} did not build, gave incorrect results, or could not be \
         evaluated; they are shown for information and must not be chosen.\n"
    );
    p.push_str(&summary.render_table());
    p.push_str(
        "\nChoose one kernel to be the Base for the next experiment: its code will be modified. \
         Choose another kernel to be the Reference, picked for its ability to help analyse \
         experiments (for instance through contrast with the Base). Weigh all benchmark \
         configurations; this is a multi-objective decision.\n\n\
         Reply with exactly this document (ids as quoted five-digit strings):\n\n\
         basis_code: \"NNNNN\"\n\
         basis_reference: \"NNNNN\"\n\
         rationale: >\n  \
           \"Why these two kernels were chosen.\"\n",
    );
    Ok(p)
}

/// Checks a parsed decision against the population.
pub fn validate_selection(decision: &SelectionDecision, population: &Population) -> Result<(), String> {
    for (field, id) in [
        ("basis_code", decision.basis_code),
        ("basis_reference", decision.basis_reference),
    ] {
        let record = population
            .get(id)
            .map_err(|_| format!("`{field}` names kernel {id}, which does not exist"))?;
        if !record.is_eligible() {
            return Err(format!(
                "`{field}` names kernel {id}, which has status {} and is not eligible",
                record.status
            ));
        }
    }
    if decision.is_degenerate() && population.eligible().count() >= 2 {
        return Err(format!(
            "basis_code and basis_reference are both {}; choose two different kernels",
            decision.basis_code
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub decision: SelectionDecision,
    pub attempts: u32,
}

impl Selection {
    pub fn is_degenerate(&self) -> bool {
        self.decision.is_degenerate()
    }
}

/// Asks the selector model for a Base/Reference pair. A decision naming a
/// missing, failed, or duplicated kernel is sent back for repair like any
/// other parse failure.
pub fn select_parents(gateway: &Gateway, population: &Population) -> Result<Selection, SelectorError> {
    if population.eligible().next().is_none() {
        return Err(SelectorError::EmptyPopulation);
    }
    let prompt = build_selector_prompt(&population.summarize())?;
    let Parsed { value, attempts } = gateway.complete_structured(RoleName::Selector, "selector", &prompt, |text| {
        let decision = parse_selection(text)?;
        validate_selection(&decision, population)?;
        Ok(decision)
    })?;
    Ok(Selection {
        decision: value,
        attempts,
    })
}
