//! Checks shared by the fuzz targets and by the corpus replay test. Each
//! takes raw bytes, must never panic, and asserts cheap invariants on
//! whatever parses.

use std::path::Path;

use kernel_scientist::designer::{parse_design, parse_plan_entries, pick_experiments, render_design, PICK_COUNT};
use kernel_scientist::evaluation::parse_result_file;
use kernel_scientist::population::{parse_benchmark, parse_index, parse_meta, parse_shapes, render_shapes};
use kernel_scientist::selector::{parse_selection, render_selection};
use kernel_scientist::writer::parse_kernel_output;
use kernel_scientist::BenchmarkShape;

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn selection(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(d) = parse_selection(t) {
        assert!(!d.rationale.is_empty());
        let again = parse_selection(&render_selection(&d)).expect("rendered selection parses");
        assert_eq!(
            (again.basis_code, again.basis_reference),
            (d.basis_code, d.basis_reference)
        );
    }
}

pub fn design(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(d) = parse_design(t) {
        assert_eq!(d.avenues.len(), 10);
        assert_eq!(d.plans.len(), 5);
        let picked = pick_experiments(&d.plans).expect("valid plans can be picked");
        assert_eq!(picked.len(), PICK_COUNT);
        let _ = parse_design(&render_design(&d));
    }
    if let Ok(plans) = parse_plan_entries(t) {
        for p in plans {
            assert!(p.performance.lo <= p.performance.hi);
        }
    }
}

pub fn kernel_output(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(c) = parse_kernel_output(t) {
        assert!(!c.source.trim().is_empty());
    }
}

pub fn result_file(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let shapes = [
        BenchmarkShape::new(6144, 512, 4096).unwrap(),
        BenchmarkShape::new(1024, 1536, 7168).unwrap(),
    ];
    if let Ok(entries) = parse_result_file(t, &shapes) {
        assert_eq!(entries.len(), shapes.len());
        assert!(entries.iter().all(|e| e.mean_time_us > 0.0));
    }
}

pub fn population_files(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(entries) = parse_index(t) {
        for e in &entries {
            assert_eq!(parse_index(&e.to_line()).unwrap(), vec![e.clone()]);
        }
    }
    if let Ok(shapes) = parse_shapes(t) {
        assert_eq!(parse_shapes(&render_shapes(&shapes)).unwrap(), shapes);
    }
    let _ = parse_meta(t);
    let _ = parse_benchmark(t);
}

pub fn knowledge_index(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(headers) = kernel_scientist::knowledge::parse_index(t) {
        for h in headers {
            assert!(!h.doc_id.is_empty());
        }
    }
}

pub fn run_config(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(c) = kernel_scientist::config::RunConfig::from_toml_str(t, Path::new("/fuzz")) {
        assert!(!c.evaluator.shapes.is_empty());
    }
}

pub fn generation_log(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let _ = kernel_scientist::orchestrator::parse_generation_log(t);
}

pub fn chat_response(data: &[u8]) {
    if let Ok(v) = serde_json::from_slice::<serde_json::Value>(data) {
        let _ = kernel_scientist::gateway::extract_message_content(&v);
    }
}

pub fn replay_script(data: &[u8]) {
    let Some(t) = text(data) else { return };
    let _ = kernel_scientist::gateway::ScriptedBackend::from_yaml(t);
}
