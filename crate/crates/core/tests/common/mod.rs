#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use kernel_scientist::designer::{render_design, DesignOutput, ExperimentPlan, PerformanceRange};
use kernel_scientist::evaluation::{EvaluatorConfig, MockSettings};
use kernel_scientist::gateway::{BackendError, ChatBackend, ChatRequest, FnBackend, GatewayConfig};
use kernel_scientist::population::BenchmarkShape;
use kernel_scientist::textdoc::fenced_blocks;
use kernel_scientist::{Evaluator, Gateway, RoleName, Scientist};

pub const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(FIXTURES).join(name)).unwrap()
}

/// Six benchmark configurations, including the one quoted in the
/// selector samples (m=6144, k=512, n=4096).
pub fn shapes() -> Vec<BenchmarkShape> {
    [
        (1024, 1536, 7168),
        (1024, 4608, 7168),
        (6144, 1536, 7168),
        (6144, 512, 4096),
        (1024, 7168, 2048),
        (6144, 7168, 256),
    ]
    .into_iter()
    .map(|(m, k, n)| BenchmarkShape::new(m, k, n).unwrap())
    .collect()
}

pub const MARKER_COUNT: usize = 60;

pub fn marker(i: usize) -> String {
    format!("OPT_{i:02}")
}

pub fn marker_settings() -> MockSettings {
    MockSettings {
        speedups: (1..=MARKER_COUNT)
            .map(|i| (marker(i), 0.95))
            .collect::<BTreeMap<_, _>>(),
        ..MockSettings::default()
    }
}

pub fn mock_evaluator() -> Evaluator {
    Evaluator::new(EvaluatorConfig::mock(shapes(), marker_settings())).unwrap()
}

pub fn seed_sources() -> Vec<String> {
    vec![
        "// baseline reference kernel\nvoid gemm() {}\n".to_string(),
        "// direct translation\nvoid gemm_hip() {}\n".to_string(),
        format!("// matrix core version\n// {}\nvoid gemm_mfma() {{}}\n", marker(1)),
    ]
}

pub fn plan(ordinal: u8, innovation: f64, lo: f64, hi: f64) -> ExperimentPlan {
    ExperimentPlan {
        ordinal,
        description: format!("Experiment number {ordinal}"),
        rubric: format!("Step one for {ordinal}.\nStep two for {ordinal}."),
        performance: PerformanceRange { lo, hi },
        innovation,
    }
}

/// A valid designer response whose rule picks ordinals (1, 5, 4).
pub fn design_response() -> String {
    let design = DesignOutput {
        avenues: (1..=10).map(|i| format!("**Avenue {i}:** idea number {i}")).collect(),
        plans: vec![
            plan(1, 85.0, 15.0, 40.0),
            plan(2, 60.0, 5.0, 15.0),
            plan(3, 70.0, 10.0, 30.0),
            plan(4, 40.0, 20.0, 25.0),
            plan(5, 50.0, 2.0, 50.0),
        ],
    };
    format!("Here is my analysis.\n\n{}\nGood luck!", render_design(&design))
}

/// Rows of the selector prompt's table: (id, aggregate score if eligible).
pub fn table_rows(prompt: &str) -> Vec<(String, Option<f64>)> {
    prompt
        .lines()
        .filter(|l| l.starts_with("| 0"))
        .map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            let score = cells.last().and_then(|c| c.parse::<f64>().ok());
            (cells[0].to_string(), score)
        })
        .collect()
}

/// Picks the best-scoring kernel as Base and the runner-up as Reference.
pub fn greedy_selection(prompt: &str) -> String {
    let mut rows: Vec<(String, f64)> = table_rows(prompt)
        .into_iter()
        .filter_map(|(id, s)| s.map(|s| (id, s)))
        .collect();
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let base = &rows[0].0;
    let reference = rows.get(1).map_or(base, |r| &r.0);
    format!(
        "After reviewing the table:\n\nbasis_code: \"{base}\"\nbasis_reference: \"{reference}\"\nrationale: >\n  \"Run {base} has the lowest aggregate; {reference} is the runner-up.\"\n"
    )
}

/// The Base listing embedded in a writer prompt.
pub fn base_listing(prompt: &str) -> String {
    let at = prompt.find("\n# Base kernel ").expect("base section");
    fenced_blocks(&prompt[at..]).unwrap()[0].content.clone()
}

pub fn markers_in(source: &str) -> Vec<usize> {
    (1..=MARKER_COUNT).filter(|&i| source.contains(&marker(i))).collect()
}

/// Behaviour knobs for the scripted writer.
#[derive(Clone, Copy)]
pub struct WriterScript {
    /// Lane index (1-based) and base-marker-count predicate for which the
    /// writer answers garbage on every attempt.
    pub abandon: fn(lane: usize, base_markers: usize) -> bool,
    /// When true, the kernel gets a `BUG` marker (mock: incorrect result).
    pub buggy: fn(lane: usize, base_markers: usize) -> bool,
}

impl Default for WriterScript {
    fn default() -> Self {
        Self {
            abandon: |_, _| false,
            buggy: |_, _| false,
        }
    }
}

/// Writer reply: copy the Base and append the `lane`-th marker the Base
/// does not have yet.
pub fn writer_reply(prompt: &str, lane: usize, script: WriterScript) -> String {
    let base = base_listing(prompt);
    let present = markers_in(&base);
    if (script.abandon)(lane, present.len()) {
        return "I could not produce a kernel this time.".to_string();
    }
    let new = (1..=MARKER_COUNT)
        .filter(|i| !present.contains(i))
        .nth(lane - 1)
        .expect("marker table exhausted");
    let mut source = base;
    source.push_str(&format!("// {}\n", marker(new)));
    if (script.buggy)(lane, present.len()) {
        source.push_str("// BUG\n");
    }
    format!(
        "Here is the kernel.\n\n```cpp\n{source}```\n\n## Technique Report\nAdded {} as the rubric asked.\n",
        marker(new)
    )
}

/// Deterministic backend: every reply is a pure function of the request.
pub fn scripted_backend(script: WriterScript) -> Arc<dyn ChatBackend> {
    Arc::new(FnBackend(
        move |req: &ChatRequest<'_>| -> Result<String, BackendError> {
            Ok(match req.role {
                RoleName::Selector => greedy_selection(req.prompt),
                RoleName::Designer => design_response(),
                RoleName::Writer => {
                    let lane: usize = req.lane.trim_start_matches("writer-").parse().unwrap();
                    writer_reply(req.prompt, lane, script)
                }
                RoleName::Digester => format!("digest of {} bytes", req.prompt.len()),
            })
        },
    ))
}

pub fn scientist(root: &Path, backend: Arc<dyn ChatBackend>) -> Scientist {
    let gateway = Gateway::new(backend, GatewayConfig::uniform("scripted", 3));
    Scientist::open(
        root,
        gateway,
        mock_evaluator(),
        "Implement an FP8 block-scaled GEMM.",
        None,
    )
    .unwrap()
}

/// Brute-force reference for the 3-of-5 plan choice: enumerate every
/// ordered triple of distinct plans and keep the one satisfying all three
/// sequential argmax conditions (ties to the smaller ordinal).
pub fn oracle_pick(plans: &[ExperimentPlan]) -> Vec<u8> {
    fn beats(a: &ExperimentPlan, p: &ExperimentPlan, key: fn(&ExperimentPlan) -> f64) -> bool {
        key(a) > key(p) || (key(a) == key(p) && a.ordinal <= p.ordinal)
    }
    let innovation: fn(&ExperimentPlan) -> f64 = |p| p.innovation;
    let hi: fn(&ExperimentPlan) -> f64 = |p| p.performance.hi;
    let lo: fn(&ExperimentPlan) -> f64 = |p| p.performance.lo;

    let mut found = Vec::new();
    for a in plans {
        for b in plans {
            for c in plans {
                if a.ordinal == b.ordinal || a.ordinal == c.ordinal || b.ordinal == c.ordinal {
                    continue;
                }
                let first = plans.iter().all(|p| beats(a, p, innovation));
                let second = plans.iter().filter(|p| p.ordinal != a.ordinal).all(|p| beats(b, p, hi));
                let third = plans
                    .iter()
                    .filter(|p| p.ordinal != a.ordinal && p.ordinal != b.ordinal)
                    .all(|p| beats(c, p, lo));
                if first && second && third {
                    found.push(vec![a.ordinal, b.ordinal, c.ordinal]);
                }
            }
        }
    }
    assert_eq!(found.len(), 1, "oracle must identify exactly one triple");
    found.pop().unwrap()
}

/// Random 5-plan set. With `ties`, values come from small discrete sets so
/// equal criteria are common.
pub fn random_plans(rng: &mut impl rand::Rng, ties: bool) -> Vec<ExperimentPlan> {
    (1..=5u8)
        .map(|ordinal| {
            let (innovation, a, b) = if ties {
                (
                    [10.0, 50.0, 90.0][rng.gen_range(0..3)],
                    rng.gen_range(0..4) as f64 * 5.0,
                    rng.gen_range(0..4) as f64 * 5.0,
                )
            } else {
                (
                    rng.gen_range(0.0..=100.0),
                    rng.gen_range(-10.0..60.0),
                    rng.gen_range(-10.0..60.0),
                )
            };
            plan(ordinal, innovation, f64::min(a, b), f64::max(a, b))
        })
        .collect()
}

pub fn has_tie(plans: &[ExperimentPlan]) -> bool {
    let mut any = false;
    for (i, p) in plans.iter().enumerate() {
        for q in &plans[i + 1..] {
            any |= p.innovation == q.innovation
                || p.performance.hi == q.performance.hi
                || p.performance.lo == q.performance.lo;
        }
    }
    any
}
