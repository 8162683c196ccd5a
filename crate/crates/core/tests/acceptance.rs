//! Acceptance gate: one test per criterion. Each prints a PASS/FAIL line
//! with details under `cargo test -p kernel-scientist --test acceptance -- --nocapture`.

mod common;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use kernel_scientist::designer::{parse_plan_entries, pick_experiments};
use kernel_scientist::evaluation::{mock_timing, EvalObserver, EvaluatorConfig, MockSettings};
use kernel_scientist::orchestrator::{load_generation_log, POPULATION_DIR};
use kernel_scientist::population::{BenchmarkShape, INDEX_FILE};
use kernel_scientist::selector::parse_selection;
use kernel_scientist::{Evaluator, RecordId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, format!("took {took:?}, limit {limit:?}"))
}

fn criterion_1_fixtures() -> Outcome {
    let started = Instant::now();
    let expected = [("00052", "00046"), ("00089", "00087"), ("00097", "00091")];
    for (i, (code, reference)) in expected.iter().enumerate() {
        let name = format!("selection_sample_{}.txt", i + 1);
        let d = parse_selection(&fixture(&name)).map_err(|e| format!("{name}: {e}"))?;
        check(
            d.basis_code.to_string() == *code && d.basis_reference.to_string() == *reference,
            format!("{name}: got {}/{}", d.basis_code, d.basis_reference),
        )?;
    }
    let p = parse_plan_entries(&fixture("design_fragment.txt"))?;
    check(p.len() == 2, format!("fragment yielded {} plans", p.len()))?;
    check(
        (p[0].performance.lo, p[0].performance.hi, p[0].innovation) == (15.0, 40.0, 85.0),
        format!("plan 1 parsed as {:?}", p[0]),
    )?;
    check(
        (p[1].performance.lo, p[1].performance.hi, p[1].innovation) == (5.0, 15.0, 60.0),
        format!("plan 2 parsed as {:?}", p[1]),
    )?;
    within(started, Duration::from_secs(1))?;
    Ok("3 selection samples and design plans 1-2 parse exactly".into())
}

fn criterion_2_picking() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut tie_sets = 0;
    for i in 0..1000 {
        let plans = random_plans(&mut rng, i % 5 == 0);
        if has_tie(&plans) {
            tie_sets += 1;
        }
        let got: Vec<u8> = pick_experiments(&plans)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|p| p.ordinal)
            .collect();
        let want = oracle_pick(&plans);
        check(got == want, format!("set {i}: picked {got:?}, oracle {want:?}"))?;
    }
    check(tie_sets >= 100, format!("only {tie_sets} sets contained ties"))?;
    within(started, Duration::from_secs(5))?;
    Ok(format!("1000 sets agree with the oracle ({tie_sets} with ties)"))
}

/// Uninterrupted ten-generation run used by criteria 3, 5 and 6.
fn run_ten(root: &Path) -> Result<kernel_scientist::orchestrator::RunSummary, String> {
    let mut s = scientist(root, scripted_backend(e2e_script()));
    s.seed(&seed_sources()).map_err(|e| e.to_string())?;
    s.run(10, None).map_err(|e| e.to_string())
}

fn e2e_script() -> WriterScript {
    WriterScript {
        abandon: |lane, markers| lane == 3 && markers % 4 == 3,
        buggy: |lane, markers| lane == 2 && markers % 5 == 2,
    }
}

fn criterion_3_end_to_end(root: &Path) -> Outcome {
    let started = Instant::now();
    let summary = run_ten(root)?;
    check(
        summary.generations.len() == 10,
        format!("{} generations ran", summary.generations.len()),
    )?;

    let abandoned: usize = summary
        .generations
        .iter()
        .map(|g| g.outcomes.iter().filter(|o| o.is_abandoned()).count())
        .sum();
    check(abandoned > 0, "script was meant to abandon some writer calls")?;
    check(
        summary.population_size == 3 + 30 - abandoned,
        format!("population {} with {abandoned} abandoned", summary.population_size),
    )?;

    let pop = kernel_scientist::orchestrator::open_population(root).map_err(|e| e.to_string())?;
    let mut previous = f64::INFINITY;
    let mut improved = 0;
    for g in &summary.generations {
        let score = g.best_score.ok_or(format!("generation {} has no best score", g.seq))?;
        if score < previous {
            improved += 1;
        }
        previous = score;
        let d = g
            .decision
            .as_ref()
            .ok_or(format!("generation {} has no decision", g.seq))?;
        for o in &g.outcomes {
            if let Some(id) = o.record {
                let r = pop.get(id).map_err(|e| e.to_string())?;
                check(
                    r.base_parent_id == Some(d.basis_code) && r.reference_parent_id == Some(d.basis_reference),
                    format!("record {id} parents do not match generation {} decision", g.seq),
                )?;
            }
        }
    }
    check(
        improved >= 8,
        format!("best score decreased in only {improved}/10 generations"),
    )?;
    within(started, Duration::from_secs(30))?;
    Ok(format!(
        "population {} ({abandoned} abandoned), best improved in {improved}/10 generations",
        summary.population_size
    ))
}

#[derive(Default)]
struct OverlapProbe {
    active: AtomicUsize,
    overlapped: AtomicBool,
    entries: AtomicUsize,
}

impl EvalObserver for OverlapProbe {
    fn entered(&self) {
        self.entries.fetch_add(1, Ordering::SeqCst);
        if self.active.fetch_add(1, Ordering::SeqCst) != 0 {
            self.overlapped.store(true, Ordering::SeqCst);
        }
        std::thread::yield_now();
    }
    fn exited(&self) {
        self.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn criterion_4_serialized() -> Outcome {
    let started = Instant::now();
    let probe = Arc::new(OverlapProbe::default());
    let settings = MockSettings {
        delay_ms: 1,
        ..marker_settings()
    };
    let evaluator = Evaluator::new(EvaluatorConfig::mock(shapes(), settings))
        .map_err(|e| e.to_string())?
        .with_observer(probe.clone());
    for trial in 0..200 {
        std::thread::scope(|scope| {
            for w in 0..3 {
                let evaluator = &evaluator;
                scope.spawn(move || {
                    evaluator.evaluate(&format!("// trial {trial} writer {w}\n")).unwrap();
                });
            }
        });
    }
    check(!probe.overlapped.load(Ordering::SeqCst), "two evaluations overlapped")?;
    let n = probe.entries.load(Ordering::SeqCst);
    check(n == 600, format!("{n} evaluations observed"))?;
    within(started, Duration::from_secs(10))?;
    Ok("600 evaluations, zero overlap".into())
}

fn criterion_5_one_step(root: &Path) -> Outcome {
    let pop = kernel_scientist::orchestrator::open_population(root).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for r in pop.records().iter().filter(|r| !r.is_seed()) {
        let text = pop.one_step_analysis(r.id).map_err(|e| e.to_string())?;
        let plan = r.experiment.as_ref().ok_or(format!("{} has no experiment", r.id))?;
        let report = r.technique_report.as_deref().ok_or(format!("{} has no report", r.id))?;
        let base = pop.get(r.base_parent_id.unwrap()).map_err(|e| e.to_string())?;
        let base_table = base.benchmark.as_ref().ok_or("base without benchmark")?.render_table();
        for (what, needle) in [
            ("description", plan.description.as_str()),
            ("rubric", plan.rubric.as_str()),
            ("technique report", report),
            ("base benchmark", base_table.as_str()),
        ] {
            check(text.contains(needle), format!("analysis of {} lacks the {what}", r.id))?;
        }
        checked += 1;
    }
    check(checked > 0, "no non-seed records to check")?;
    Ok(format!("{checked} non-seed analyses complete"))
}

fn criterion_6_resume(reference_root: &Path) -> Outcome {
    let want = fs::read(reference_root.join(POPULATION_DIR).join(INDEX_FILE)).map_err(|e| e.to_string())?;
    let want_best = load_generation_log(reference_root, 10).map_err(|e| e.to_string())?.best;
    for k in [1u32, 4, 7] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        {
            let mut s = scientist(dir.path(), scripted_backend(e2e_script()));
            s.seed(&seed_sources()).map_err(|e| e.to_string())?;
            s.run(k, None).map_err(|e| e.to_string())?;
        }
        // debris of an insert that never reached the index
        let next = RecordId::new(
            kernel_scientist::orchestrator::open_population(dir.path())
                .map_err(|e| e.to_string())?
                .len() as u32
                + 1,
        )
        .ok_or("id overflow")?;
        let orphan = dir.path().join(POPULATION_DIR).join(next.to_string());
        fs::create_dir_all(&orphan).map_err(|e| e.to_string())?;
        fs::write(orphan.join("source.kernel"), "half written").map_err(|e| e.to_string())?;

        let mut s = scientist(dir.path(), scripted_backend(e2e_script()));
        s.run(10 - k, None).map_err(|e| e.to_string())?;
        let got = fs::read(dir.path().join(POPULATION_DIR).join(INDEX_FILE)).map_err(|e| e.to_string())?;
        check(got == want, format!("index after resume at k={k} differs"))?;
        let best = load_generation_log(dir.path(), 10).map_err(|e| e.to_string())?.best;
        check(best == want_best, format!("final best differs after resume at k={k}"))?;
    }
    Ok("resume after k=1,4,7 reproduces the uninterrupted index".into())
}

fn criterion_7_mock_timing() -> Outcome {
    let shape = BenchmarkShape::new(6144, 512, 4096).map_err(|e| e.to_string())?;
    let oracle = 12_884_901_888f64.sqrt();
    let plain = mock_timing("void k() {}", &shape, &Default::default());
    check(
        ((plain - oracle) / oracle).abs() <= 1e-6,
        format!("plain timing {plain}, expected {oracle}"),
    )?;
    check((plain - 113_511.7).abs() < 0.1, format!("plain timing {plain}"))?;

    let one = [("OPT_L2".to_string(), 0.8)].into_iter().collect();
    let t = mock_timing("// OPT_L2\n", &shape, &one);
    check(
        ((t - 0.8 * oracle) / oracle).abs() <= 1e-6,
        format!("OPT_L2 timing {t}"),
    )?;

    let two = [("a".to_string(), 0.5), ("b".to_string(), 0.5)].into_iter().collect();
    let t = mock_timing("a + b", &shape, &two);
    check(((t - 0.25 * oracle) / oracle).abs() <= 1e-6, format!("a,b timing {t}"))?;
    Ok(format!("sqrt(m*k*n) = {plain:.1} us, factors multiply"))
}

fn report(n: u32, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
        Err(why) => {
            println!("criterion {n} FAIL  {name}: {why}");
            panic!("criterion {n} ({name}) failed: {why}");
        }
    }
}

#[test]
fn criterion_1() {
    report(1, "golden fixtures", criterion_1_fixtures());
}

#[test]
fn criterion_2() {
    report(2, "3-of-5 picking rule", criterion_2_picking());
}

#[test]
fn criterion_3() {
    let dir = tempfile::tempdir().unwrap();
    report(3, "end-to-end mock run", criterion_3_end_to_end(dir.path()));
}

#[test]
fn criterion_4() {
    report(4, "serialized evaluation", criterion_4_serialized());
}

#[test]
fn criterion_5() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_ten(dir.path()).and_then(|_| criterion_5_one_step(dir.path()));
    report(5, "one-step analysis", outcome);
}

#[test]
fn criterion_6() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_ten(dir.path()).and_then(|_| criterion_6_resume(dir.path()));
    report(6, "crash resume", outcome);
}

#[test]
fn criterion_7() {
    report(7, "mock timing", criterion_7_mock_timing());
}
