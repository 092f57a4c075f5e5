//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use qgs_core::baselines::{train_ebp, train_ga, EbpConfig, GaConfig};
use qgs_core::benchmarks::{generate_dataset, System};
use qgs_core::qgs::{search_minima, SearchBudget, SearchConfig};
use qgs_core::residual::jacobian_fd;
use qgs_core::run::{benchmark_search, replay, run_train, start_point, RunReport, TrainConfig, TrainData, TrainMethod};
use qgs_core::stability::{bounds_suite, descent_suite, perturbation_suite, rate_suite, SuiteConfig};
use qgs_core::{Dataset, FnResidual, NetworkShape, ParamVector, ResidualSystem, SensitivityMode, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn double_well() -> FnResidual {
    FnResidual::scalar(|x| x * x - 1.0, |x| 2.0 * x)
}

fn jacobian_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let t = rng.random_range(1..=2);
        let samples = rng.random_range(1..=10);
        let shape = NetworkShape::new(n, m, t).unwrap();
        let inputs: Vec<Vec<f64>> =
            (0..samples).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<Vec<f64>> =
            (0..samples).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let data = Dataset::from_rows(inputs, targets).unwrap();
        let sys = ResidualSystem::new(data, shape, SensitivityMode::FullRecurrent).unwrap();
        let x = ParamVector::random_normal(shape, 0.5, &mut rng);
        let jac = sys.jacobian_at(&x).unwrap();
        let fd = jacobian_fd(&sys, x.values(), 1e-6).unwrap();
        worst = worst.max((&jac - &fd).amax() / (1.0 + fd.amax()));
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} over 50 instances"))
}

fn lyapunov_descent() -> Outcome {
    let r = descent_suite(&SuiteConfig { trials: 20, seed: 7, t: 1 }, 5).unwrap();
    outcome(
        r.passed() && r.points_checked >= 100,
        format!(
            "{} monotonicity violations over 20 trajectories, {}/{} derivative checks agree",
            r.monotone_violations, r.points_ok, r.points_checked
        ),
    )
}

fn exponential_rate() -> Outcome {
    let r = rate_suite(&SuiteConfig { trials: 3, seed: 11, t: 1 }).unwrap();
    let frac = r.pass_fraction();
    outcome(
        r.checked > 0 && frac >= 0.95,
        format!("{}/{} points satisfy the bound ({:.1}%), {} skipped", r.passed, r.checked, 100.0 * frac, r.skipped),
    )
}

fn perturbation() -> Outcome {
    let r = perturbation_suite(&SuiteConfig { trials: 100, seed: 5, t: 1 }).unwrap();
    let target = (1.0 + 2f64.sqrt()).powi(2);
    let bounds_ok = (r.reference_bound_zero - 1.0).abs() <= 1e-12 && (r.reference_bound_unit - target).abs() <= 1e-12;
    outcome(
        r.passed() && r.trials.len() == 100 && bounds_ok,
        format!(
            "{}/100 descend, {}/100 ascend, bounds {} and {:.13}",
            r.small_ok, r.aligned_ascent, r.reference_bound_zero, r.reference_bound_unit
        ),
    )
}

fn norm_bounds() -> Outcome {
    let r = bounds_suite(&SuiteConfig { trials: 100, seed: 13, t: 1 }).unwrap();
    outcome(
        r.violations == 0 && r.trials.len() == 100,
        format!(
            "{} violations in {} instances (one-step Jacobian; full recurrent Jacobian above the bound in {})",
            r.violations,
            r.trials.len(),
            r.trials.iter().filter(|t| t.dh_recurrent_norm > t.dh_bound).count()
        ),
    )
}

fn multi_minimum_search() -> Outcome {
    let out = search_minima(
        &double_well(),
        &DVector::from_element(1, 0.3),
        &SearchConfig::default(),
        &SearchBudget::default(),
    )
    .unwrap();
    let mut xs: Vec<f64> = out.archive.records.iter().map(|r| r.x[0]).collect();
    xs.sort_by(f64::total_cmp);
    let well_ok = xs.len() == 2 && (xs[0] + 1.0).abs() < 1e-6 && (xs[1] - 1.0).abs() < 1e-6;

    let train = generate_dataset(System::Example1, 50, 1, Split::Train).unwrap();
    let shape = NetworkShape::new(4, 4, 1).unwrap();
    let sys = ResidualSystem::new(train, shape, SensitivityMode::FullRecurrent).unwrap();
    let mut cfg = TrainConfig::benchmark(TrainMethod::Qgs, 4, 1);
    cfg.search = SearchConfig { restarts: 200, ..benchmark_search() };
    let x0 = start_point(shape, &cfg);
    let budget = SearchBudget { max_minima: 100, max_escape_attempts: 200, max_wall_seconds: 270.0, seed: 1 };
    let desk = search_minima(&sys, x0.values(), &cfg.search, &budget).unwrap();
    outcome(
        well_ok && desk.archive.len() >= 3,
        format!(
            "double well {xs:?}; desk search archived {} minima ({} forward runs, {} escapes, {} restarts, stop {:?})",
            desk.archive.len(),
            desk.forward_runs,
            desk.escape_attempts,
            desk.restarts,
            desk.stop_reason
        ),
    )
}

fn benchmark_data(system: System, samples: usize, seed: u64) -> TrainData {
    TrainData {
        train: generate_dataset(system, samples, seed, Split::Train).unwrap(),
        test: generate_dataset(system, samples, seed, Split::Test).unwrap(),
        validation: Some(generate_dataset(system, samples, seed + 1000, Split::Test).unwrap()),
    }
}

fn benchmark(system: System, hidden: usize, samples: usize, median_limit: f64) -> Outcome {
    let mut qgs = Vec::new();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let data = benchmark_data(system, samples, seed);
        let q = run_train(&TrainConfig::benchmark(TrainMethod::Qgs, hidden, seed), &data);
        let e = run_train(&TrainConfig::benchmark(TrainMethod::Ebp, hidden, seed), &data);
        let g = run_train(&TrainConfig::benchmark(TrainMethod::Ga, hidden, seed), &data);
        let mse = |r: &qgs_core::Result<qgs_core::run::RunOutput>| r.as_ref().map_or(f64::INFINITY, |o| o.report.test_mse);
        let (qm, em, gm) = (mse(&q), mse(&e), mse(&g));
        if qm < em {
            wins += 1;
        }
        let source = q.as_ref().map(|o| format!("{:?}", o.report.selection.source)).unwrap_or_else(|e| e.to_string());
        rows.push(format!("s{seed}: qgs {qm:.5} ({source}) ebp {em:.5} ga {gm:.5}"));
        qgs.push(qm);
    }
    qgs.sort_by(f64::total_cmp);
    let median = qgs[2];
    outcome(
        median <= median_limit && wins >= 4,
        format!("median QGS test MSE {median:.5}, QGS < EBP in {wins}/5 [{}]", rows.join("; ")),
    )
}

fn baseline_sanity() -> Outcome {
    let ga = train_ga(
        &double_well(),
        &GaConfig { population: 50, generations: 100, init_sigma: 1.0, seed: 3, ..Default::default() },
    )
    .unwrap();
    let root_err = (ga.x_best[0].abs() - 1.0).abs();
    let ebp = train_ebp(
        &FnResidual::scalar(|x| x, |_| 1.0),
        &DVector::from_element(1, 1.0),
        &EbpConfig { learning_rate: 0.5, max_epochs: 3, grad_tol: 0.0, ..Default::default() },
    )
    .unwrap();
    outcome(
        root_err < 5e-2 && ebp.x[0] == 0.125,
        format!("GA root error {root_err:.2e}, EBP after 3 steps {}", ebp.x[0]),
    )
}

fn reproducibility() -> Outcome {
    let data = benchmark_data(System::Example1, 50, 3);
    let mut notes = Vec::new();
    let mut pass = true;
    for method in [TrainMethod::Qgs, TrainMethod::Ebp, TrainMethod::Ga] {
        let mut cfg = TrainConfig::benchmark(method, 4, 3);
        cfg.budget.max_escape_attempts = 4;
        let first = run_train(&cfg, &data).unwrap();
        let echoed = RunReport::from_json(&first.report.to_json().unwrap()).unwrap();
        let again = replay(&echoed, &data).unwrap();
        let diffs = again.report.metric_differences(&first.report);
        pass &= diffs.is_empty();
        notes.push(format!("{}: {}", method.as_str(), if diffs.is_empty() { "identical".to_string() } else { diffs.join(",") }));
    }
    outcome(pass, notes.join(", "))
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, f64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "Jacobian correctness", 10.0, jacobian_property),
        (2, "Lyapunov descent", 60.0, lyapunov_descent),
        (3, "exponential rate", 60.0, exponential_rate),
        (4, "perturbation robustness", 60.0, perturbation),
        (5, "norm bounds", 60.0, norm_bounds),
        (6, "multi-minimum search", 300.0, multi_minimum_search),
        (7, "benchmark example 1", 1800.0, || benchmark(System::Example1, 8, 200, 0.02)),
        (8, "benchmark example 2", 1800.0, || benchmark(System::Example2, 6, 100, 0.01)),
        (9, "baseline sanity", 60.0, baseline_sanity),
        (10, "reproducibility", 600.0, reproducibility),
    ];
    let mut failed = 0;
    for (id, name, limit, run) in criteria {
        let started = Instant::now();
        let o = run();
        let secs = started.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} ({}; {secs:.1}s of {limit:.0}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
