mod common;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use kernel_scientist::evaluation::{
    mock_timing, parse_result_file, EvalError, EvalObserver, EvaluatorConfig, MockSettings,
};
use kernel_scientist::{BenchmarkShape, EvalOutcome, Evaluator, KernelStatus};

fn two_shapes() -> Vec<BenchmarkShape> {
    vec![
        BenchmarkShape::new(6144, 512, 4096).unwrap(),
        BenchmarkShape::new(64, 64, 64).unwrap(),
    ]
}

fn mock(speedups: &[(&str, f64)]) -> Evaluator {
    let settings = MockSettings {
        speedups: speedups.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        ..MockSettings::default()
    };
    Evaluator::new(EvaluatorConfig::mock(two_shapes(), settings)).unwrap()
}

fn rel_eq(a: f64, b: f64) -> bool {
    ((a - b) / b).abs() <= 1e-9
}

#[test]
fn mock_marker_scales_time() {
    let e = mock(&[("OPT_L2", 0.8)]);
    let plain = e.evaluate("void k() {}").unwrap();
    let fast = e.evaluate("void k() { /* OPT_L2 */ }").unwrap();
    for (p, f) in plain
        .report()
        .unwrap()
        .entries
        .iter()
        .zip(&fast.report().unwrap().entries)
    {
        assert!(rel_eq(f.mean_time_us, 0.8 * p.mean_time_us));
    }
    let base = (6144f64 * 512.0 * 4096.0).sqrt();
    assert!(rel_eq(plain.report().unwrap().entries[0].mean_time_us, base));
}

#[test]
fn mock_markers_compose_and_count_once() {
    let speedups: BTreeMap<String, f64> = [("a".to_string(), 0.5), ("b".to_string(), 0.5)].into();
    let shape = BenchmarkShape::new(2, 2, 1).unwrap();
    assert!(rel_eq(mock_timing("a b", &shape, &speedups), 0.5));
    assert!(rel_eq(mock_timing("a a a", &shape, &speedups), 1.0));
    // whole-token match only
    assert!(rel_eq(mock_timing("ab a_b", &shape, &speedups), 2.0));
}

#[test]
fn mock_failure_markers() {
    let e = mock(&[]);
    let bug = e.evaluate("x = 1; // BUG").unwrap();
    assert_eq!(bug.status(), KernelStatus::Incorrect);
    assert!(bug.report().is_none());
    assert!(matches!(
        e.evaluate("BUILD_FAIL").unwrap(),
        EvalOutcome::BuildFailed { .. }
    ));
    assert!(matches!(e.evaluate("  \n"), Err(EvalError::EmptySource)));
}

fn external(script: &str, timeout: Duration) -> Evaluator {
    let template = format!("test -f {{source_path}} && {{ {script}; }}");
    Evaluator::new(EvaluatorConfig::external(two_shapes(), template, timeout)).unwrap()
}

#[test]
fn template_must_name_the_source() {
    let config = EvaluatorConfig::external(two_shapes(), "make bench", Duration::from_secs(1));
    assert!(matches!(Evaluator::new(config), Err(EvalError::Config(_))));
}

#[test]
fn external_happy_path() {
    let script = r#"grep -q kernel {source_path} && \
        while read m k n; do echo "$m $k $n 12.5 true"; done < {shapes_path} > {result_path}"#;
    let out = external(script, Duration::from_secs(10)).evaluate("my kernel").unwrap();
    let report = out.report().unwrap_or_else(|| panic!("{}", out.summary()));
    assert_eq!(report.entries.len(), 2);
    assert!(report.entries.iter().all(|e| e.mean_time_us == 12.5 && e.correct));
    assert_eq!(report.entries[0].shape, two_shapes()[0]);
}

#[test]
fn external_result_in_working_directory() {
    let script = "printf '6144 512 4096 3 1\\n64 64 64 4 0\\n' > result.txt";
    let out = external(script, Duration::from_secs(10)).evaluate("k").unwrap();
    assert_eq!(out.status(), KernelStatus::Incorrect);
}

#[test]
fn external_nonzero_exit_is_build_failure_with_log() {
    let out = external("echo 'error: expected ;' >&2; exit 3", Duration::from_secs(10))
        .evaluate("k")
        .unwrap();
    match out {
        EvalOutcome::BuildFailed { log } => assert!(log.contains("error: expected ;"), "{log}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn external_timeout_kills_process_group() {
    let started = Instant::now();
    let out = external("sleep 30 & sleep 30; wait", Duration::from_millis(300))
        .evaluate("k")
        .unwrap();
    assert!(started.elapsed() < Duration::from_secs(10));
    match out {
        EvalOutcome::EvalError { diagnostic } => assert!(diagnostic.contains("timed out")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn external_bad_or_missing_result_is_eval_error() {
    let garbage = external("echo 'not a result' > {result_path}", Duration::from_secs(10));
    assert_eq!(garbage.evaluate("k").unwrap().status(), KernelStatus::EvalError);
    let missing = external("true", Duration::from_secs(10));
    assert_eq!(missing.evaluate("k").unwrap().status(), KernelStatus::EvalError);
}

#[test]
fn result_file_format() {
    let shapes = two_shapes();
    let ok = "# header\n6144 512 4096 1.5 true\n\n64 64 64 2 1\n";
    assert_eq!(parse_result_file(ok, &shapes).unwrap().len(), 2);
    assert!(parse_result_file("64 64 64 2 1\n6144 512 4096 1.5 true\n", &shapes).is_err());
    assert!(parse_result_file("6144 512 4096 1.5 true\n", &shapes).is_err());
    assert!(parse_result_file("6144 512 4096 -1 true\n64 64 64 2 1\n", &shapes).is_err());
    assert!(parse_result_file("6144 512 4096 1 maybe\n64 64 64 2 1\n", &shapes).is_err());
}

#[derive(Default)]
struct Intervals(Mutex<Vec<(Instant, Instant)>>, Mutex<Option<Instant>>);

impl EvalObserver for Intervals {
    fn entered(&self) {
        *self.1.lock().unwrap() = Some(Instant::now());
    }
    fn exited(&self) {
        let start = self.1.lock().unwrap().take().unwrap();
        self.0.lock().unwrap().push((start, Instant::now()));
    }
}

#[test]
fn concurrent_submissions_never_overlap() {
    let probe = Arc::new(Intervals::default());
    let settings = MockSettings {
        delay_ms: 5,
        ..MockSettings::default()
    };
    let evaluator = Evaluator::new(EvaluatorConfig::mock(two_shapes(), settings))
        .unwrap()
        .with_observer(probe.clone());
    std::thread::scope(|s| {
        for i in 0..6 {
            let e = &evaluator;
            s.spawn(move || e.evaluate(&format!("kernel {i}")).unwrap());
        }
    });
    let mut spans = probe.0.lock().unwrap().clone();
    spans.sort();
    assert_eq!(spans.len(), 6);
    for w in spans.windows(2) {
        assert!(w[0].1 <= w[1].0, "overlapping evaluations");
    }
}
