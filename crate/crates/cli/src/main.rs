use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use qgs_core::benchmarks::{generate_dataset, System};
use qgs_core::fsio::write_atomic;
use qgs_core::qgs::integrate_forward;
use qgs_core::run::{
    compare_reports, load_reports, predictions_csv, run_train, start_point, RunReport, TrainConfig, TrainData,
    TrainMethod,
};
use qgs_core::stability::{bounds_suite, descent_suite, perturbation_suite, rate_suite, SuiteConfig};
use qgs_core::{Dataset, NetworkShape, Split};

#[derive(Parser)]
#[command(name = "qgs", version, about = "Train recurrent networks by gradient-system integration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset (CSV plus JSON sidecar).
    GenData {
        #[arg(long)]
        system: SystemArg,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network and write a run report.
    Train {
        /// Overrides the method in the config file.
        #[arg(long)]
        method: Option<MethodArg>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Dataset used to pick among QGS minima; defaults to the test set.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Number of hidden units; overrides the config file.
        #[arg(long)]
        hidden: Option<usize>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// JSON training config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Test-set targets and predictions as CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Objective history (EBP, GA) or the first forward trajectory (QGS) as CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Re-run a report's configuration and compare its metrics.
    Replay {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Run a numerical check suite on random instances.
    Stability {
        #[arg(long)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dimension of the random networks.
        #[arg(long, default_value_t = 1)]
        t: usize,
        /// Sampled points per trajectory in the descent suite.
        #[arg(long, default_value_t = 5)]
        points: usize,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run reports into a comparison table.
    Compare {
        #[arg(long)]
        runs: PathBuf,
        /// CSV table; a JSON copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Example1,
    Example2,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Qgs,
    Ga,
    Ebp,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Descent,
    Rate,
    Perturbation,
    Bounds,
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_data(train: &Path, test: &Path, validation: Option<&Path>) -> Result<TrainData> {
    Ok(TrainData {
        train: read_dataset(train)?,
        test: read_dataset(test)?,
        validation: validation.map(read_dataset).transpose()?,
    })
}

fn gen_data(system: SystemArg, samples: usize, seed: u64, split: SplitArg, out: &Path) -> Result<()> {
    let system = match system {
        SystemArg::Example1 => System::Example1,
        SystemArg::Example2 => System::Example2,
    };
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = generate_dataset(system, samples, seed, split)?;
    data.write_csv(out).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    method: Option<MethodArg>,
    data: TrainData,
    hidden: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
    out: &Path,
    predictions: Option<&Path>,
    trajectory: Option<&Path>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(m) = method {
        cfg.method = match m {
            MethodArg::Qgs => TrainMethod::Qgs,
            MethodArg::Ga => TrainMethod::Ga,
            MethodArg::Ebp => TrainMethod::Ebp,
        };
    }
    if let Some(h) = hidden {
        cfg.hidden = h;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let output = run_train(&cfg, &data)?;
    let mut report = output.report;

    if let Some(path) = predictions {
        write_atomic(path, &predictions_csv(&output.x, &data.test)?)?;
        report.artifacts.push(path.to_path_buf());
    }
    if let Some(path) = trajectory {
        match &output.history {
            Some(h) => {
                let label = if report.method == TrainMethod::Ga { "generation" } else { "epoch" };
                qgs_core::baselines::write_history_csv(path, label, h)?;
            }
            None => {
                let resolved = report.config.clone();
                let shape = NetworkShape::new(data.train.input_dim(), resolved.hidden, data.train.output_dim())?;
                let sys = qgs_core::ResidualSystem::new(data.train.clone(), shape, resolved.sensitivity)?;
                let x0 = start_point(shape, &resolved);
                let run = integrate_forward(&sys, x0.values(), &resolved.search.integrator)?;
                run.trace.write_csv(path, false)?;
            }
        }
        report.artifacts.push(path.to_path_buf());
    }
    report.write(out).with_context(|| format!("writing report {}", out.display()))?;
    println!(
        "{}: train MSE {:.6e}, test MSE {:.6e}, generalization {:.3}% -> {}",
        report.method.as_str(),
        report.train_mse,
        report.test_mse,
        report.generalization_pct,
        out.display()
    );
    Ok(())
}

fn replay(report_path: &Path, data: TrainData) -> Result<bool> {
    let report = RunReport::read(report_path).with_context(|| format!("reading report {}", report_path.display()))?;
    let again = qgs_core::run::replay(&report, &data)?;
    let diffs = again.report.metric_differences(&report);
    if diffs.is_empty() {
        println!("replay matches: test MSE {:.6e}", again.report.test_mse);
        Ok(true)
    } else {
        println!("replay differs in: {}", diffs.join(", "));
        Ok(false)
    }
}

fn emit(json: String, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn stability(suite: SuiteArg, cfg: SuiteConfig, points: usize, out: Option<&Path>) -> Result<bool> {
    let (passed, summary, json) = match suite {
        SuiteArg::Descent => {
            let r = descent_suite(&cfg, points)?;
            let s = format!(
                "descent: {} monotonicity violations, {}/{} derivative checks agree",
                r.monotone_violations, r.points_ok, r.points_checked
            );
            (r.passed(), s, serde_json::to_string_pretty(&r)?)
        }
        SuiteArg::Rate => {
            let r = rate_suite(&cfg)?;
            let frac = r.pass_fraction();
            let s = format!(
                "rate: {}/{} points satisfy the decay bound ({:.1}%), {} skipped",
                r.passed,
                r.checked,
                100.0 * frac,
                r.skipped
            );
            (r.checked > 0 && frac >= 0.95, s, serde_json::to_string_pretty(&r)?)
        }
        SuiteArg::Perturbation => {
            let r = perturbation_suite(&cfg)?;
            let n = r.trials.len();
            let s = format!(
                "perturbation: {}/{n} small perturbations descend, {}/{n} aligned ones ascend; bounds {} and {}",
                r.small_ok, r.aligned_ascent, r.reference_bound_zero, r.reference_bound_unit
            );
            (r.passed(), s, serde_json::to_string_pretty(&r)?)
        }
        SuiteArg::Bounds => {
            let r = bounds_suite(&cfg)?;
            let s = format!("bounds: {} violations in {} instances", r.violations, r.trials.len());
            (r.violations == 0, s, serde_json::to_string_pretty(&r)?)
        }
    };
    emit(json, out)?;
    eprintln!("{summary}: {}", if passed { "pass" } else { "FAIL" });
    Ok(passed)
}

fn compare(runs: &Path, out: &Path) -> Result<()> {
    let reports = load_reports(runs)?;
    let table = compare_reports(&reports)?;
    write_atomic(out, &table.to_csv()?)?;
    write_atomic(&out.with_extension("json"), serde_json::to_string_pretty(&table)?.as_bytes())?;
    for r in &table.rows {
        let reference = r.reference_mse.map(|v| format!(" (reference {v})")).unwrap_or_default();
        println!(
            "{} {:<3} runs {:>2}  median test MSE {:.5}{reference}",
            r.system,
            r.method.as_str(),
            r.runs,
            r.test_mse_median
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { system, samples, seed, split, out } => gen_data(system, samples, seed, split, &out)?,
        Command::Train {
            method,
            train: train_path,
            test,
            validation,
            hidden,
            seed,
            config,
            out,
            predictions,
            trajectory,
        } => {
            let data = load_data(&train_path, &test, validation.as_deref())?;
            train(
                method,
                data,
                hidden,
                seed,
                config.as_deref(),
                &out,
                predictions.as_deref(),
                trajectory.as_deref(),
            )?
        }
        Command::Replay { report, train, test, validation } => {
            let data = load_data(&train, &test, validation.as_deref())?;
            return replay(&report, data);
        }
        Command::Stability { suite, trials, seed, t, points, out } => {
            if points == 0 {
                bail!("--points must be >= 1");
            }
            return stability(suite, SuiteConfig { trials, seed, t }, points, out.as_deref());
        }
        Command::Compare { runs, out } => compare(&runs, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
