//! Worker loop: regenerate candidates from seeds, score them, report.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use super::transport::Endpoint;
use super::wire::{JobError, JobErrorKind, Message, RewardReport, COORDINATOR_ID, PROTOCOL_VERSION};
use super::{config_hash, CandidateEvaluator, CmaInit, SchedulerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerReport {
    pub worker_id: u32,
    pub jobs: u64,
    /// Generation the replica reached.
    pub generation: u64,
}

fn transport(e: impl std::fmt::Display) -> SchedulerError {
    SchedulerError::Transport(e.to_string())
}

/// Serves jobs until the coordinator sends Shutdown.
pub fn worker_serve(
    mut endpoint: Endpoint,
    evaluator: &dyn CandidateEvaluator,
    init: &CmaInit,
) -> Result<WorkerReport, SchedulerError> {
    let hash = config_hash(evaluator, init);
    let result = serve(&mut endpoint, evaluator, init, hash);
    endpoint.sink.close();
    result
}

fn serve(
    endpoint: &mut Endpoint,
    evaluator: &dyn CandidateEvaluator,
    init: &CmaInit,
    hash: [u8; 32],
) -> Result<WorkerReport, SchedulerError> {
    endpoint
        .sink
        .send(&Message::Hello {
            version: PROTOCOL_VERSION,
            config_hash: hash,
        }
        .encode())
        .map_err(transport)?;
    let recv = |endpoint: &mut Endpoint| -> Result<Message, SchedulerError> {
        match endpoint.source.recv().map_err(transport)? {
            Some(frame) => Message::decode(&frame).map_err(transport),
            None => Err(SchedulerError::Transport("coordinator closed the connection".into())),
        }
    };
    let worker_id = match recv(endpoint)? {
        Message::HelloAck {
            version,
            config_hash,
            worker_id,
        } if version == PROTOCOL_VERSION && config_hash == hash => worker_id,
        Message::HelloAck { .. } => return Err(SchedulerError::ConfigMismatch),
        Message::JobError(JobError {
            kind: JobErrorKind::ConfigMismatch,
            ..
        }) => return Err(SchedulerError::ConfigMismatch),
        other => {
            return Err(SchedulerError::Transport(format!(
                "expected HelloAck, got message type {}",
                other.type_code()
            )))
        }
    };

    let mut replica = init.state()?;
    let lambda = replica.population();
    let mut pending: Vec<Option<f64>> = vec![None; lambda];
    let mut jobs = 0;
    loop {
        match recv(endpoint)? {
            Message::EvalJob(job) => {
                let index = job.index as usize;
                let reject = |kind, message: String| {
                    Message::JobError(JobError {
                        generation: job.generation,
                        index: job.index,
                        worker_id,
                        kind,
                        message,
                    })
                };
                let reply = if job.config_hash != hash {
                    reject(JobErrorKind::ConfigMismatch, "configuration hash differs".into())
                } else if job.generation != replica.generation()
                    || index >= lambda
                    || job.seed != replica.candidate_seed(index)
                {
                    reject(
                        JobErrorKind::Desync,
                        format!(
                            "job ({}, {index}) does not match replica at generation {}",
                            job.generation,
                            replica.generation()
                        ),
                    )
                } else {
                    let x = replica.candidate(index);
                    let started = Instant::now();
                    let outcome = catch_unwind(AssertUnwindSafe(|| {
                        evaluator.evaluate(job.generation, index, &x)
                    }));
                    jobs += 1;
                    match outcome {
                        Ok(Ok(reward)) if reward.is_finite() => Message::RewardReport(RewardReport {
                            generation: job.generation,
                            index: job.index,
                            reward,
                            eval_millis: started.elapsed().as_millis() as u64,
                            worker_id,
                        }),
                        Ok(Ok(reward)) => reject(JobErrorKind::EvaluationFailed, format!("non-finite reward {reward}")),
                        Ok(Err(message)) => reject(JobErrorKind::EvaluationFailed, message),
                        Err(_) => reject(JobErrorKind::EvaluationFailed, "evaluation panicked".into()),
                    }
                };
                endpoint.sink.send(&reply.encode()).map_err(transport)?;
            }
            Message::RewardReport(r) if r.worker_id == COORDINATOR_ID => {
                let index = r.index as usize;
                if r.generation != replica.generation() || index >= lambda {
                    return Err(SchedulerError::Desync(format!(
                        "reward for ({}, {index}) while replica is at generation {}",
                        r.generation,
                        replica.generation()
                    )));
                }
                pending[index] = Some(r.reward);
                if pending.iter().all(Option::is_some) {
                    let rewards: Vec<f64> = pending.iter().map(|r| r.unwrap()).collect();
                    replica.tell_rewards(&rewards)?;
                    pending.iter_mut().for_each(|r| *r = None);
                }
            }
            Message::Shutdown => {
                return Ok(WorkerReport {
                    worker_id,
                    jobs,
                    generation: replica.generation(),
                })
            }
            other => log::warn!("worker {worker_id}: ignoring message type {}", other.type_code()),
        }
    }
}
