//! Wall-clock scaling over worker counts.

use std::fmt::Write;
use std::sync::Arc;
use std::time::Instant;

use super::{run_in_process, CandidateEvaluator, ClusterConfig, CmaInit, Control, Progress, RunStart, SchedulerError};

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub workers: usize,
    pub generations: u64,
    pub wall_millis: u64,
    /// Whether `target` was reached; always true without a target.
    pub reached_target: bool,
    pub best_reward: f64,
}

/// Runs the same search once per worker count in `grid`. With a target the
/// run stops at the first generation whose best reward reaches it.
pub fn measure_scaling(
    grid: &[usize],
    population: usize,
    max_generations: u64,
    target: Option<f64>,
    evaluator: Arc<dyn CandidateEvaluator>,
    init: &CmaInit,
) -> Result<Vec<ScalingRow>, SchedulerError> {
    let mut rows = Vec::with_capacity(grid.len());
    for &workers in grid {
        let config = ClusterConfig::new(population, workers, max_generations);
        let mut reached = target.is_none();
        let mut stop_at_target = |p: &Progress<'_>| -> Result<Control, String> {
            if target.is_some_and(|t| p.best.reward >= t) {
                reached = true;
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        };
        let started = Instant::now();
        let report = run_in_process(&config, evaluator.clone(), init, RunStart::fresh(init)?, &mut stop_at_target)?;
        rows.push(ScalingRow {
            workers,
            generations: report.metrics.len() as u64,
            wall_millis: started.elapsed().as_millis() as u64,
            reached_target: reached,
            best_reward: report.best.map_or(f64::NEG_INFINITY, |b| b.reward),
        });
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let base = rows.iter().find(|r| r.workers == 1).map(|r| r.wall_millis as f64);
    let mut out = String::from("workers,generations,wall_millis,speedup,reached_target,best_reward\n");
    for r in rows {
        let speedup = base.map_or(f64::NAN, |b| b / (r.wall_millis.max(1) as f64));
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{},{}",
            r.workers, r.generations, r.wall_millis, speedup, r.reached_target, r.best_reward
        );
    }
    out
}
