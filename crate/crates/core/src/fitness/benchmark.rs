//! Classic minimisation test functions, negated for maximisation.

use std::f64::consts::PI;
use std::time::Instant;

use crate::cmaes::{CmaError, CmaState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkFn {
    Sphere,
    Rosenbrock,
    Rastrigin,
}

impl BenchmarkFn {
    pub const ALL: [BenchmarkFn; 3] = [BenchmarkFn::Sphere, BenchmarkFn::Rosenbrock, BenchmarkFn::Rastrigin];

    /// The textbook (minimisation) value.
    pub fn value(self, x: &[f64]) -> f64 {
        match self {
            BenchmarkFn::Sphere => x.iter().map(|v| v * v).sum(),
            BenchmarkFn::Rosenbrock => x
                .windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum(),
            BenchmarkFn::Rastrigin => {
                10.0 * x.len() as f64
                    + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
            }
        }
    }

    pub fn reward(self, x: &[f64]) -> f64 {
        -self.value(x)
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkFn::Sphere => "sphere",
            BenchmarkFn::Rosenbrock => "rosenbrock",
            BenchmarkFn::Rastrigin => "rastrigin",
        }
    }

    pub fn from_name(name: &str) -> Option<BenchmarkFn> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Location of the global optimum in `dim` dimensions.
    pub fn optimum(self, dim: usize) -> Vec<f64> {
        match self {
            BenchmarkFn::Rosenbrock => vec![1.0; dim],
            _ => vec![0.0; dim],
        }
    }
}

/// One optimiser convergence check: run until the best reward reaches
/// `target` or `max_generations` is spent.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub function: BenchmarkFn,
    pub dim: usize,
    pub population: usize,
    pub sigma0: f64,
    /// Every coordinate of the initial mean.
    pub start: f64,
    pub max_generations: u64,
    pub target: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutcome {
    pub case: BenchmarkCase,
    /// Generations run, including the one that reached the target.
    pub generations: u64,
    pub evaluations: u64,
    pub best: f64,
    pub passed: bool,
    pub millis: u64,
}

/// The regression suite: sphere and Rosenbrock at the reference budgets,
/// plus a small multimodal Rastrigin run.
pub fn standard_suite() -> Vec<BenchmarkCase> {
    vec![
        BenchmarkCase {
            function: BenchmarkFn::Sphere,
            dim: 10,
            population: 10,
            sigma0: 0.5,
            start: 1.0,
            max_generations: 2000,
            target: -1e-10,
            seed: 1,
        },
        BenchmarkCase {
            function: BenchmarkFn::Rosenbrock,
            dim: 5,
            population: 10,
            sigma0: 0.5,
            start: 0.0,
            max_generations: 5000,
            target: -1e-8,
            seed: 7,
        },
        BenchmarkCase {
            function: BenchmarkFn::Rastrigin,
            dim: 2,
            population: 20,
            sigma0: 2.0,
            start: 3.0,
            max_generations: 2000,
            target: -1e-8,
            seed: 3,
        },
    ]
}

pub fn run_case(case: &BenchmarkCase) -> Result<BenchmarkOutcome, CmaError> {
    let started = Instant::now();
    let mut state =
        CmaState::new(case.dim, case.sigma0, case.population, case.seed)?.with_mean(vec![case.start; case.dim])?;
    let mut best = f64::NEG_INFINITY;
    let mut generations = 0;
    while generations < case.max_generations && best < case.target {
        let mut gen = state.ask()?;
        for i in 0..gen.len() {
            let r = case.function.reward(&gen.candidates()[i]);
            best = best.max(r);
            gen.set_reward(i, r);
        }
        state.tell(&gen)?;
        generations += 1;
        if state.is_stalled() {
            break;
        }
    }
    Ok(BenchmarkOutcome {
        case: case.clone(),
        generations,
        evaluations: generations * case.population as u64,
        best,
        passed: best >= case.target,
        millis: started.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_checked_points() {
        let table: [(BenchmarkFn, &[f64], f64); 9] = [
            (BenchmarkFn::Sphere, &[0.0, 0.0], 0.0),
            (BenchmarkFn::Sphere, &[1.0, -2.0, 3.0], 14.0),
            (BenchmarkFn::Rosenbrock, &[1.0, 1.0, 1.0], 0.0),
            (BenchmarkFn::Rosenbrock, &[0.0, 0.0], 1.0),
            // 100·(1 − 0)² + (1 + 1)² = 104
            (BenchmarkFn::Rosenbrock, &[-1.0, 0.0], 104.0),
            // (100·(2−1)² + 0) + (100·(0−4)² + 1) = 100 + 1601
            (BenchmarkFn::Rosenbrock, &[1.0, 2.0, 0.0], 1701.0),
            (BenchmarkFn::Rastrigin, &[0.0, 0.0, 0.0], 0.0),
            (BenchmarkFn::Rastrigin, &[1.0], 1.0),
            (BenchmarkFn::Rastrigin, &[0.5, -0.5], 40.5),
        ];
        for (f, x, expected) in table {
            assert!((f.value(x) - expected).abs() < 1e-12, "{f:?} at {x:?}: {}", f.value(x));
            assert_eq!(f.reward(x), -f.value(x));
        }
    }

    #[test]
    fn optimum_scores_zero() {
        for f in BenchmarkFn::ALL {
            assert!(f.reward(&f.optimum(7)).abs() < 1e-12);
            assert_eq!(BenchmarkFn::from_name(f.name()), Some(f));
        }
    }

    #[test]
    fn standard_suite_passes() {
        for case in standard_suite() {
            let outcome = run_case(&case).unwrap();
            assert!(outcome.passed, "{outcome:?}");
            assert_eq!(outcome.evaluations, outcome.generations * case.population as u64);
        }
    }
}
