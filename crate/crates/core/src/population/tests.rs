use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use super::*;
use crate::designer::PerformanceRange;

fn shapes() -> Vec<BenchmarkShape> {
    vec![
        BenchmarkShape::new(64, 64, 64).unwrap(),
        BenchmarkShape::new(6144, 512, 4096).unwrap(),
    ]
}

fn report(times: &[f64], correct: bool) -> BenchmarkReport {
    BenchmarkReport {
        entries: shapes()
            .into_iter()
            .zip(times)
            .map(|(shape, &mean_time_us)| BenchmarkEntry {
                shape,
                mean_time_us,
                correct,
            })
            .collect(),
        evaluated_at: Utc.with_ymd_and_hms(2025, 6, 1, 12, 0, 0).unwrap(),
    }
}

fn plan() -> ExperimentPlan {
    ExperimentPlan {
        ordinal: 2,
        description: "Distribute the C write-back across all waves.".into(),
        rubric: "Remove the single-wave guard.\nCheck boundaries.".into(),
        performance: PerformanceRange { lo: 5.0, hi: 15.0 },
        innovation: 60.0,
    }
}

fn seed(times: &[f64]) -> NewRecord {
    let mut r = NewRecord::seed("// seed\n");
    r.benchmark = Some(report(times, true));
    r
}

fn evaluated_child(base: RecordId, reference: RecordId, times: &[f64]) -> NewRecord {
    let mut r = NewRecord::child(base, reference, "// child\n", plan());
    r.technique_report = Some("Used cooperative stores.".into());
    r.benchmark = Some(report(times, true));
    r.status = KernelStatus::Evaluated;
    r.generation = Some(1);
    r
}

fn id(n: u32) -> RecordId {
    RecordId::new(n).unwrap()
}

fn fresh() -> (tempfile::TempDir, Population) {
    let dir = tempfile::tempdir().unwrap();
    let pop = Population::open_or_create(dir.path().join("population"), &shapes()).unwrap();
    (dir, pop)
}

#[test]
fn first_record_gets_00001() {
    let (_d, mut pop) = fresh();
    assert_eq!(pop.add_record(seed(&[1.0, 2.0])).unwrap().to_string(), "00001");
    assert_eq!(pop.get(id(1)).unwrap().created_seq, 1);
}

#[test]
fn fifty_third_record_after_child_of_52_and_46() {
    let (_d, mut pop) = fresh();
    for i in 0..52 {
        pop.add_record(seed(&[10.0 + f64::from(i), 20.0])).unwrap();
    }
    let new = pop.add_record(evaluated_child(id(52), id(46), &[5.0, 5.0])).unwrap();
    assert_eq!(new.to_string(), "00053");
    let r = pop.get(new).unwrap();
    assert_eq!(r.base_parent_id, Some(id(52)));
    assert_eq!(r.reference_parent_id, Some(id(46)));
}

#[test]
fn unknown_parent_is_rejected_without_side_effects() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[1.0, 1.0])).unwrap();
    let err = pop
        .add_record(evaluated_child(id(99_999), id(1), &[1.0, 1.0]))
        .unwrap_err();
    assert!(matches!(err, PopulationError::UnknownParent(p) if p == id(99_999)));
    assert_eq!(pop.len(), 1);
    assert!(!pop.record_dir(id(2)).exists());
}

#[test]
fn seed_invariants_are_enforced() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[1.0, 1.0])).unwrap();
    let mut half = evaluated_child(id(1), id(1), &[1.0, 1.0]);
    half.reference_parent_id = None;
    assert!(matches!(pop.add_record(half), Err(PopulationError::InvalidRecord(_))));
    let mut seed_with_plan = seed(&[1.0, 1.0]);
    seed_with_plan.experiment = Some(plan());
    assert!(matches!(
        pop.add_record(seed_with_plan),
        Err(PopulationError::InvalidRecord(_))
    ));
    assert!(matches!(
        pop.add_record(NewRecord::seed("  \n")),
        Err(PopulationError::InvalidRecord(_))
    ));
}

#[test]
fn benchmark_must_cover_configured_shapes() {
    let (_d, mut pop) = fresh();
    let mut r = seed(&[1.0, 1.0]);
    r.benchmark.as_mut().unwrap().entries.pop();
    assert!(pop.add_record(r).is_err());
}

#[test]
fn summary_aggregate_of_equal_timings_is_that_timing() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[120.0, 120.0])).unwrap();
    let got = pop.summarize().rows[0].aggregate_score.unwrap();
    assert!((got - 120.0).abs() <= 120.0 * 1e-12, "{got}");
}

#[test]
fn summary_aggregate_is_geometric_mean() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[100.0, 400.0])).unwrap();
    // independent oracle: exp of the mean log
    let oracle = ((100f64.ln() + 400f64.ln()) / 2.0).exp();
    let got = pop.summarize().rows[0].aggregate_score.unwrap();
    assert!((got - oracle).abs() < 1e-9 && (got - 200.0).abs() < 1e-9);
}

#[test]
fn failed_rows_show_marker_and_no_aggregate() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[1.0, 1.0])).unwrap();
    let mut broken = NewRecord::child(id(1), id(1), "// broken\n", plan());
    broken.status = KernelStatus::BuildFailed;
    broken.failure = Some("error: expected ';'".into());
    pop.add_record(broken).unwrap();

    let summary = pop.summarize();
    assert_eq!(summary.rows[1].timings, RowTimings::Failed);
    assert_eq!(summary.rows[1].aggregate_score, None);
    let table = summary.render_table();
    let row = table.lines().find(|l| l.starts_with("| 00002")).unwrap();
    assert!(row.contains(FAILURE_MARKER) && row.contains("build_failed") && row.ends_with("| - |"));
}

#[test]
fn one_step_analysis_of_child() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    let child = pop.add_record(evaluated_child(id(1), id(1), &[5.0, 10.0])).unwrap();
    let text = pop.one_step_analysis(child).unwrap();
    assert!(text.contains(&plan().description));
    assert!(text.contains(&plan().rubric));
    assert!(text.contains("Used cooperative stores."));
    assert!(text.contains(&pop.get(id(1)).unwrap().benchmark.as_ref().unwrap().render_table()));
    assert!(text.contains(&pop.get(child).unwrap().benchmark.as_ref().unwrap().render_table()));
}

#[test]
fn one_step_analysis_of_seed_and_unknown() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    let text = pop.one_step_analysis(id(1)).unwrap();
    assert!(text.contains("seed kernel, no prior experiment."));
    assert!(matches!(pop.resolve("ZZZZZ"), Err(PopulationError::UnknownId(s)) if s == "ZZZZZ"));
    assert!(matches!(
        pop.one_step_analysis(id(7)),
        Err(PopulationError::UnknownId(_))
    ));
}

#[test]
fn best_record_prefers_earliest_on_tie() {
    let (_d, mut pop) = fresh();
    assert!(matches!(pop.best_record(), Err(PopulationError::NoEvaluatedRecords)));
    pop.add_record(seed(&[30.0, 30.0])).unwrap();
    pop.add_record(seed(&[20.0, 20.0])).unwrap();
    pop.add_record(seed(&[20.0, 20.0])).unwrap();
    assert_eq!(pop.best_record().unwrap(), id(2));
}

#[test]
fn failed_seed_is_not_eligible() {
    let (_d, mut pop) = fresh();
    let mut r = NewRecord::seed("// broken seed\n");
    r.failure = Some("compile error".into());
    pop.add_record(r).unwrap();
    assert_eq!(pop.eligible().count(), 0);
    assert!(pop.best_record().is_err());
    assert_eq!(pop.summarize().rows[0].timings, RowTimings::Failed);
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reload_and_replay_are_byte_identical() {
    let (dir, mut pop) = fresh();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    pop.add_record(seed(&[12.0, 18.0])).unwrap();
    pop.add_record(evaluated_child(id(1), id(2), &[9.0, 17.0])).unwrap();
    let mut failed = NewRecord::child(id(3), id(1), "// bug\n", plan());
    failed.status = KernelStatus::Incorrect;
    failed.benchmark = Some(report(&[1.0, 1.0], false));
    failed.failure = Some("mismatch at (0, 0)".into());
    pop.add_record(failed).unwrap();

    let reloaded = Population::open(dir.path().join("population")).unwrap();
    assert_eq!(reloaded.records(), pop.records());

    let other = tempfile::tempdir().unwrap();
    let mut replay = Population::open_or_create(other.path(), &shapes()).unwrap();
    for r in reloaded.records() {
        replay.add_record(NewRecord::from(r)).unwrap();
    }
    assert_eq!(tree_bytes(other.path()), tree_bytes(&dir.path().join("population")));
}

#[test]
fn uncommitted_record_dir_is_ignored_and_overwritten() {
    let (dir, mut pop) = fresh();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    let orphan = pop.record_dir(id(2));
    fs::create_dir_all(&orphan).unwrap();
    fs::write(orphan.join(SOURCE_FILE), "partial").unwrap();

    let mut pop = Population::open(dir.path().join("population")).unwrap();
    assert_eq!(pop.len(), 1);
    let mut r = NewRecord::seed("// second\n");
    r.benchmark = Some(report(&[1.0, 2.0], true));
    assert_eq!(pop.add_record(r).unwrap(), id(2));
    assert_eq!(fs::read_to_string(orphan.join(SOURCE_FILE)).unwrap(), "// second\n");
}

#[test]
fn reopening_with_other_shapes_fails() {
    let (dir, _pop) = fresh();
    let other = [BenchmarkShape::new(1, 2, 3).unwrap()];
    assert!(matches!(
        Population::open_or_create(dir.path().join("population"), &other),
        Err(PopulationError::ShapeMismatch { .. })
    ));
}

#[test]
fn lineage_walks_base_parents() {
    let (_d, mut pop) = fresh();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    pop.add_record(seed(&[10.0, 20.0])).unwrap();
    pop.add_record(evaluated_child(id(1), id(2), &[9.0, 9.0])).unwrap();
    pop.add_record(evaluated_child(id(3), id(2), &[8.0, 8.0])).unwrap();
    assert_eq!(pop.lineage(id(4)).unwrap(), vec![id(4), id(3), id(1)]);
}

fn arb_records() -> impl Strategy<Value = Vec<KernelRecord>> {
    prop::collection::vec((any::<bool>(), 0u8..4, 1.0f64..1e5, 1.0f64..1e5), 0..1000).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (is_seed, status, a, b))| {
                let n = i as u32 + 1;
                let mut r = if is_seed || n == 1 {
                    seed(&[a, b])
                } else {
                    evaluated_child(id(1), id(n - 1), &[a, b])
                };
                if r.experiment.is_some() {
                    r.status = [
                        KernelStatus::Evaluated,
                        KernelStatus::BuildFailed,
                        KernelStatus::Incorrect,
                        KernelStatus::Pending,
                    ][status as usize];
                }
                KernelRecord::from_new(id(n), u64::from(n), r)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summary_has_one_row_per_record(records in arb_records()) {
        let summary = PopulationSummary::from_records(&shapes(), &records);
        prop_assert_eq!(summary.rows.len(), records.len());
        let table = summary.render_table();
        prop_assert_eq!(table.lines().count(), records.len() + 2);
        for (row, rec) in summary.rows.iter().zip(&records) {
            prop_assert_eq!(row.id, rec.id);
            prop_assert_eq!(row.aggregate_score.is_some(), rec.is_eligible());
        }
    }
}
