//! `sves worker`: connects to a coordinator and serves evaluation jobs.

use std::time::Duration;

use sves_core::scheduler::transport::connect_with_retry;
use sves_core::scheduler::{worker_serve, WorkerReport};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pipeline;

/// `connect` defaults to the configured listen address. The population
/// must match the coordinator's, since it is part of the handshake digest.
pub fn cmd_worker(config: &RunConfig, connect: Option<&str>, population: Option<usize>) -> Result<WorkerReport, CliError> {
    let objective = pipeline::load_objective(config, &config.output.dir)?;
    let init = pipeline::cma_init(config, &objective, population.unwrap_or(config.es.population));
    let addr = connect.unwrap_or(&config.transport.listen).to_string();
    log::info!("connecting to {addr}");
    let endpoint = connect_with_retry(addr.as_str(), config.transport.connect_attempts, Duration::from_millis(200))
        .map_err(|e| CliError::Transport(e.to_string()))?;
    let report = worker_serve(endpoint, &objective, &init)?;
    log::info!(
        "worker {} served {} jobs through generation {}",
        report.worker_id,
        report.jobs,
        report.generation
    );
    Ok(report)
}
