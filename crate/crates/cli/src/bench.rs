//! `sves bench`: optimizer benchmarks and worker scaling.

use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use sves_core::fitness::{run_case, standard_suite, BenchmarkFn, BenchmarkOutcome};
use sves_core::scheduler::{measure_scaling, scaling_csv, BenchmarkObjective, CmaInit, Delayed};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub function: String,
    pub dim: usize,
    pub population: usize,
    pub generations: u64,
    pub evaluations: u64,
    pub best: f64,
    pub target: f64,
    pub passed: bool,
    pub millis: u64,
}

impl From<&BenchmarkOutcome> for BenchRow {
    fn from(o: &BenchmarkOutcome) -> Self {
        BenchRow {
            function: o.case.function.name().to_string(),
            dim: o.case.dim,
            population: o.case.population,
            generations: o.generations,
            evaluations: o.evaluations,
            best: o.best,
            target: o.case.target,
            passed: o.passed,
            millis: o.millis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub results: Vec<BenchRow>,
    pub passed: bool,
}

pub fn run_suite() -> Result<BenchReport, CliError> {
    let mut results = Vec::new();
    for case in standard_suite() {
        let outcome = run_case(&case)?;
        log::info!(
            "{} d={}: best {:e} after {} generations",
            case.function.name(),
            case.dim,
            outcome.best,
            outcome.generations
        );
        results.push(BenchRow::from(&outcome));
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(BenchReport { results, passed })
}

pub fn render_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<12} {:>4} {:>4} {:>6} {:>8} {:>12} {:>8} {:>7}\n",
        "function", "dim", "pop", "gens", "evals", "best", "ms", "status"
    );
    for r in &report.results {
        out.push_str(&format!(
            "{:<12} {:>4} {:>4} {:>6} {:>8} {:>12.3e} {:>8} {:>7}\n",
            r.function,
            r.dim,
            r.population,
            r.generations,
            r.evaluations,
            r.best,
            r.millis,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOptions {
    pub workers: Vec<usize>,
    pub population: usize,
    pub generations: u64,
    pub delay: Duration,
    pub dim: usize,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions {
            workers: vec![1, 2, 4, 8],
            population: 64,
            generations: 3,
            delay: Duration::from_millis(50),
            dim: 10,
        }
    }
}

/// Wall time per worker count on the sphere function with a fixed sleep
/// per evaluation, as CSV.
pub fn run_scaling(options: &ScalingOptions) -> Result<String, CliError> {
    let evaluator = Arc::new(Delayed {
        inner: BenchmarkObjective(BenchmarkFn::Sphere),
        delay: options.delay,
    });
    let init = CmaInit {
        sigma0: 0.5,
        population: options.population,
        seed: 1,
        mean: vec![1.0; options.dim],
    };
    let rows = measure_scaling(&options.workers, options.population, options.generations, None, evaluator, &init)?;
    Ok(scaling_csv(&rows))
}
