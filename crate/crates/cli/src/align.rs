//! `sves align`: distributed search over singular-value deltas.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use sves_core::fitness::{hex_digest, AlignmentObjective, FitnessSpec};
use sves_core::lowrank::{adapters_from_pairs, write_adapters};
use sves_core::scheduler::transport::accept_workers;
use sves_core::scheduler::{
    config_hash, run, run_in_process, CmaInit, Control, Progress, RunObserver, RunReport, RunStart, TransportKind,
};

use crate::artifacts::{self, *};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignOptions {
    pub resume: bool,
    /// One independent run per population, each in `pop<P>/`.
    pub populations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignSummary {
    pub population: usize,
    pub workers: usize,
    pub dim: usize,
    pub generations: u64,
    pub evaluations: u64,
    pub stopped_early: bool,
    pub resumed_from: Option<u64>,
    pub best_reward: f64,
    pub best_generation: u64,
    pub best_index: usize,
    /// Reward of the unperturbed supervised adapters on the generation-0
    /// subset.
    pub sft_subset_reward: f64,
    /// Accuracies over the whole alignment split.
    pub baseline_accuracy: f64,
    pub final_mean_accuracy: f64,
    pub best_candidate_accuracy: f64,
    pub config_hash: String,
    pub run_dir: PathBuf,
}

pub fn cmd_align(config: &RunConfig, options: &AlignOptions) -> Result<Vec<AlignSummary>, CliError> {
    let root = &config.output.dir;
    let objective = Arc::new(pipeline::load_objective(config, root)?);
    match &options.populations {
        None => Ok(vec![align_one(config, &objective, config.es.population, root, options.resume)?]),
        Some(populations) => populations
            .iter()
            .map(|&p| {
                config.cluster(p).validate()?;
                align_one(config, &objective, p, &root.join(format!("pop{p}")), options.resume)
            })
            .collect(),
    }
}

fn align_one(
    config: &RunConfig,
    objective: &Arc<AlignmentObjective>,
    population: usize,
    dir: &Path,
    resume: bool,
) -> Result<AlignSummary, CliError> {
    let cluster = config.cluster(population);
    cluster.validate()?;
    let init = pipeline::cma_init(config, objective, population);
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;

    let start = if resume {
        let checkpoint = artifacts::read_required(dir, CMA_CHECKPOINT, "nothing to resume")?;
        let text = String::from_utf8_lossy(&artifacts::read(&dir.join(REWARDS))?).into_owned();
        let start = RunStart::resume(&init, &checkpoint, artifacts::parse_rewards(&text)?)?;
        let done = start.history.len();
        log::info!("resuming {} at generation {done}", dir.display());
        artifacts::truncate_lines(&dir.join(METRICS), done + 1)?;
        artifacts::truncate_lines(&dir.join(REWARDS), done)?;
        artifacts::truncate_lines(&dir.join(SUBSETS), done)?;
        start
    } else {
        for name in [METRICS, REWARDS, SUBSETS, CMA_CHECKPOINT, CMA_FINAL, SUMMARY, FINAL_ADAPTERS] {
            let _ = std::fs::remove_file(dir.join(name));
        }
        artifacts::write_atomic(&dir.join(METRICS), format!("{METRICS_HEADER}\n").as_bytes())?;
        RunStart::fresh(&init)?
    };
    let resumed_from = resume.then(|| start.state.generation());
    let mut snapshot = config.clone();
    snapshot.es.population = population;
    artifacts::write_atomic(&dir.join(ALIGN_CONFIG), snapshot.to_toml().as_bytes())?;

    let mut files = RunFiles::open(dir, &objective.fitness, config.es.checkpoint_every)?;
    let report = match cluster.transport {
        TransportKind::InProcess => run_in_process(&cluster, objective.clone(), &init, start, &mut files)?,
        TransportKind::Socket => {
            let listener = TcpListener::bind(&config.transport.listen)
                .map_err(|e| CliError::Transport(format!("cannot listen on {}: {e}", config.transport.listen)))?;
            log::info!("waiting for {} workers on {}", cluster.workers, config.transport.listen);
            let endpoints = accept_workers(
                &listener,
                cluster.workers,
                Duration::from_secs(config.transport.accept_timeout_secs),
            )
            .map_err(|e| CliError::Transport(e.to_string()))?;
            run(&cluster, &**objective, &init, endpoints, start, &mut files)?
        }
    };
    files.checkpoint(&report.final_state.checkpoint())?;
    artifacts::write_atomic(&dir.join(CMA_FINAL), &report.final_state.checkpoint())?;
    finish(config, objective, &init, dir, population, resumed_from, &report)
}

fn finish(
    config: &RunConfig,
    objective: &AlignmentObjective,
    init: &CmaInit,
    dir: &Path,
    population: usize,
    resumed_from: Option<u64>,
    report: &RunReport,
) -> Result<AlignSummary, CliError> {
    let best = report
        .best
        .clone()
        .ok_or_else(|| CliError::Config("the run did not complete a single generation".into()))?;
    let zero = vec![0.0; objective.dim()];
    let final_adapters = adapters_from_pairs(&objective.adapters, &objective.factors(&best.candidate)?)?;
    artifacts::write_atomic(&dir.join(FINAL_ADAPTERS), &write_adapters(&final_adapters)?)?;
    let generations = report.final_state.generation();
    let summary = AlignSummary {
        population,
        workers: config.es.workers,
        dim: objective.dim(),
        generations,
        evaluations: generations * population as u64,
        stopped_early: report.stopped_early,
        resumed_from,
        best_reward: best.reward,
        best_generation: best.generation,
        best_index: best.index,
        sft_subset_reward: objective.score(0, 0, &zero)?,
        baseline_accuracy: objective.full_accuracy(&zero)?,
        final_mean_accuracy: objective.full_accuracy(report.final_state.mean())?,
        best_candidate_accuracy: objective.full_accuracy(&best.candidate)?,
        config_hash: hex_digest(&config_hash(objective, init)),
        run_dir: dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    artifacts::write_atomic(&dir.join(SUMMARY), json.as_bytes())?;
    log::info!(
        "done: best reward {:.4} (SFT {:.4}); alignment-split accuracy {:.4} -> {:.4}",
        summary.best_reward,
        summary.sft_subset_reward,
        summary.baseline_accuracy,
        summary.final_mean_accuracy
    );
    Ok(summary)
}

/// Appends per-generation rows and writes checkpoints as the run advances.
struct RunFiles<'a> {
    dir: PathBuf,
    fitness: &'a FitnessSpec,
    every: u64,
    metrics: File,
    rewards: File,
    subsets: File,
}

impl<'a> RunFiles<'a> {
    fn open(dir: &Path, fitness: &'a FitnessSpec, every: u64) -> Result<Self, CliError> {
        let append = |name: &str| {
            let path = dir.join(name);
            OpenOptions::new().create(true).append(true).open(&path).map_err(CliError::io(&path))
        };
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            fitness,
            every,
            metrics: append(METRICS)?,
            rewards: append(REWARDS)?,
            subsets: append(SUBSETS)?,
        })
    }

    fn checkpoint(&self, bytes: &[u8]) -> Result<(), CliError> {
        artifacts::write_atomic(&self.dir.join(CMA_CHECKPOINT), bytes)
    }

    fn record(&mut self, p: &Progress<'_>) -> Result<(), CliError> {
        let m = p.metrics;
        writeln!(
            self.metrics,
            "{},{},{},{},{},{},{},{},{},{}",
            m.generation,
            m.evaluations,
            m.best,
            m.mean,
            m.worst,
            m.wall_millis,
            m.subset_hash,
            m.eval_millis,
            m.payload_bytes,
            m.frame_bytes
        )
        .map_err(io(METRICS))?;
        let indices = self
            .fitness
            .generation_subset(m.generation)?
            .map(|ix| ix.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        writeln!(self.subsets, "{}\t{}\t{indices}", m.generation, m.subset_hash).map_err(io(SUBSETS))?;
        // The reward line must be durable before a checkpoint that needs it.
        self.rewards
            .write_all(artifacts::rewards_line(m.generation, p.rewards).as_bytes())
            .map_err(io(REWARDS))?;
        self.rewards.sync_data().map_err(io(REWARDS))?;
        if p.state.generation().is_multiple_of(self.every) {
            self.checkpoint(&p.state.checkpoint())?;
        }
        if m.generation.is_multiple_of(10) {
            log::info!(
                "generation {}: best {:.4} mean {:.4} (best so far {:.4}), {} ms",
                m.generation,
                m.best,
                m.mean,
                p.best.reward,
                m.wall_millis
            );
        }
        Ok(())
    }
}

fn io(name: &'static str) -> impl FnOnce(std::io::Error) -> CliError {
    CliError::io(Path::new(name))
}

impl RunObserver for RunFiles<'_> {
    fn on_generation(&mut self, progress: &Progress<'_>) -> Result<Control, String> {
        self.record(progress).map_err(|e| e.to_string())?;
        Ok(Control::Continue)
    }
}
