//! Coordinator side of the generation loop.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Instant;

use super::transport::{counting, in_process_pair, Endpoint, FrameSink, FrameSource, Traffic};
use super::wire::{EvalJob, JobErrorKind, Message, RewardReport, WireError, COORDINATOR_ID, PROTOCOL_VERSION};
use super::{
    config_hash, partition, BestSeen, CandidateEvaluator, ClusterConfig, CmaInit, Control, GenerationMetrics,
    Progress, RunObserver, RunReport, RunStart, SchedulerError,
};
use super::worker::worker_serve;
use crate::cmaes::Generation;

enum Event {
    Frame(usize, Message),
    Corrupt(usize, WireError),
    Closed(usize),
}

struct Link {
    sink: Box<dyn FrameSink>,
    alive: bool,
}

fn spawn_reader(worker: usize, mut source: Box<dyn FrameSource>, events: Sender<Event>) {
    std::thread::spawn(move || loop {
        let event = match source.recv() {
            Ok(Some(frame)) => match Message::decode(&frame) {
                Ok(msg) => Event::Frame(worker, msg),
                Err(e) => Event::Corrupt(worker, e),
            },
            Ok(None) => Event::Closed(worker),
            Err(e) => {
                log::debug!("link {worker}: {e}");
                Event::Closed(worker)
            }
        };
        let closed = matches!(event, Event::Closed(_));
        if events.send(event).is_err() || closed {
            return;
        }
    });
}

struct Cluster<'a> {
    config: &'a ClusterConfig,
    hash: [u8; 32],
    links: Vec<Link>,
    events: Receiver<Event>,
}

impl Cluster<'_> {
    fn live(&self) -> Vec<usize> {
        (0..self.links.len()).filter(|&w| self.links[w].alive).collect()
    }

    fn kill(&mut self, worker: usize, reason: &str) {
        if self.links[worker].alive {
            log::warn!("dropping worker {worker}: {reason}");
            self.links[worker].alive = false;
            self.links[worker].sink.close();
        }
    }

    fn send(&mut self, worker: usize, msg: &Message) -> bool {
        if !self.links[worker].alive {
            return false;
        }
        match self.links[worker].sink.send(&msg.encode()) {
            Ok(()) => true,
            Err(e) => {
                self.kill(worker, &e.to_string());
                false
            }
        }
    }

    /// Waits for every worker's Hello, acknowledges matching ones and
    /// replays the reward history to them.
    fn handshake(&mut self, history: &[Vec<f64>]) -> Result<(), SchedulerError> {
        let mut greeted = vec![false; self.links.len()];
        let deadline = Instant::now() + self.config.job_timeout;
        let mut mismatches = 0;
        while greeted.iter().zip(&self.links).any(|(g, l)| !g && l.alive) {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(remaining) {
                Ok(Event::Frame(w, Message::Hello { version, config_hash })) if !greeted[w] => {
                    greeted[w] = true;
                    if version != PROTOCOL_VERSION || config_hash != self.hash {
                        mismatches += 1;
                        self.send(
                            w,
                            &Message::JobError(super::wire::JobError {
                                generation: 0,
                                index: 0,
                                worker_id: w as u32,
                                kind: JobErrorKind::ConfigMismatch,
                                message: "configuration hash differs".into(),
                            }),
                        );
                        self.kill(w, "configuration hash mismatch");
                        continue;
                    }
                    self.send(
                        w,
                        &Message::HelloAck {
                            version: PROTOCOL_VERSION,
                            config_hash: self.hash,
                            worker_id: w as u32,
                        },
                    );
                    for (g, rewards) in history.iter().enumerate() {
                        for (i, &reward) in rewards.iter().enumerate() {
                            self.send(w, &reward_broadcast(g as u64, i, reward));
                        }
                    }
                }
                Ok(Event::Frame(w, _)) => self.kill(w, "unexpected message during handshake"),
                Ok(Event::Corrupt(w, e)) => self.kill(w, &e.to_string()),
                Ok(Event::Closed(w)) => self.kill(w, "closed during handshake"),
                Err(RecvTimeoutError::Timeout) => {
                    for w in 0..self.links.len() {
                        if !greeted[w] {
                            self.kill(w, "no Hello before the deadline");
                        }
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        if self.live().is_empty() {
            return Err(if mismatches > 0 {
                SchedulerError::ConfigMismatch
            } else {
                SchedulerError::Transport("no worker completed the handshake".into())
            });
        }
        Ok(())
    }

    fn job(&self, gen: &Generation, index: usize) -> Message {
        Message::EvalJob(EvalJob {
            generation: gen.id(),
            index: index as u32,
            seed: gen.seeds()[index],
            config_hash: self.hash,
        })
    }

    /// Sends jobs out and collects every reward of `gen`.
    fn evaluate(&mut self, gen: &mut Generation) -> Result<u64, SchedulerError> {
        let lambda = gen.len();
        let id = gen.id();
        let failed = |reason: String| SchedulerError::GenerationFailed { generation: id, reason };
        let mut owner: Vec<Option<usize>> = vec![None; lambda];
        let mut attempts = vec![0u32; lambda];
        let mut eval_millis = 0;

        let live = self.live();
        if live.is_empty() {
            return Err(failed("no live workers".into()));
        }
        for (&w, block) in live.iter().zip(partition(lambda, live.len())) {
            for i in block {
                owner[i] = Some(w);
                attempts[i] = 1;
                let job = self.job(gen, i);
                self.send(w, &job);
            }
        }

        let mut deadline = Instant::now() + self.config.job_timeout;
        loop {
            // Jobs whose worker is gone go to the least loaded live worker,
            // at most once per job.
            let orphans: Vec<usize> = (0..lambda)
                .filter(|&i| gen.rewards()[i].is_none())
                .filter(|&i| owner[i].is_none_or(|w| !self.links[w].alive))
                .collect();
            for i in orphans {
                if attempts[i] >= 2 {
                    return Err(failed(format!("candidate {i} failed twice")));
                }
                let live = self.live();
                let target = live
                    .iter()
                    .copied()
                    .min_by_key(|&w| (0..lambda).filter(|&j| gen.rewards()[j].is_none() && owner[j] == Some(w)).count())
                    .ok_or_else(|| failed("no live workers left".into()))?;
                attempts[i] += 1;
                owner[i] = Some(target);
                let job = self.job(gen, i);
                log::info!("rescheduling candidate {i} of generation {id} on worker {target}");
                if !self.send(target, &job) {
                    owner[i] = None;
                    attempts[i] -= 1;
                }
            }
            if gen.is_complete() {
                return Ok(eval_millis);
            }

            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(remaining) {
                Ok(Event::Frame(w, _)) | Ok(Event::Corrupt(w, _)) | Ok(Event::Closed(w)) if !self.links[w].alive => {}
                Ok(Event::Frame(_, Message::RewardReport(r))) => {
                    let i = r.index as usize;
                    if r.generation != id || i >= lambda || gen.rewards()[i].is_some() {
                        log::debug!("ignoring stale or duplicate report ({}, {i})", r.generation);
                    } else if !r.reward.is_finite() {
                        owner[i] = None;
                    } else {
                        gen.set_reward(i, r.reward);
                        eval_millis += r.eval_millis;
                    }
                }
                Ok(Event::Frame(w, Message::JobError(e))) => match e.kind {
                    JobErrorKind::EvaluationFailed if e.generation == id && (e.index as usize) < lambda => {
                        log::warn!("worker {w} failed candidate {}: {}", e.index, e.message);
                        let i = e.index as usize;
                        if gen.rewards()[i].is_none() {
                            if attempts[i] >= 2 {
                                return Err(failed(format!("candidate {i}: {}", e.message)));
                            }
                            owner[i] = None;
                        }
                    }
                    _ => self.kill(w, &format!("{:?}: {}", e.kind, e.message)),
                },
                Ok(Event::Frame(w, other)) => {
                    self.kill(w, &format!("unexpected message type {}", other.type_code()))
                }
                Ok(Event::Corrupt(w, e)) => self.kill(w, &format!("corrupt frame ({e})")),
                Ok(Event::Closed(w)) => self.kill(w, "connection closed"),
                Err(RecvTimeoutError::Timeout) => {
                    for i in 0..lambda {
                        if gen.rewards()[i].is_none() {
                            if let Some(w) = owner[i] {
                                self.kill(w, "job timed out");
                            }
                        }
                    }
                    deadline = Instant::now() + self.config.job_timeout;
                }
                Err(RecvTimeoutError::Disconnected) => return Err(failed("all links closed".into())),
            }
        }
    }

    fn broadcast(&mut self, generation: u64, rewards: &[f64]) {
        for w in self.live() {
            for (i, &r) in rewards.iter().enumerate() {
                if !self.send(w, &reward_broadcast(generation, i, r)) {
                    break;
                }
            }
        }
    }

    fn shutdown(&mut self) {
        for w in self.live() {
            self.send(w, &Message::Shutdown);
            self.links[w].sink.close();
            self.links[w].alive = false;
        }
    }
}

fn reward_broadcast(generation: u64, index: usize, reward: f64) -> Message {
    Message::RewardReport(RewardReport {
        generation,
        index: index as u32,
        reward,
        eval_millis: 0,
        worker_id: COORDINATOR_ID,
    })
}

/// Runs generations until `config.generations` is reached, the search
/// stalls, or the observer stops it.
///
/// `evaluator` is only used for digests and subset hashes; all scoring
/// happens on the workers behind `endpoints`.
pub fn run(
    config: &ClusterConfig,
    evaluator: &dyn CandidateEvaluator,
    init: &CmaInit,
    endpoints: Vec<Endpoint>,
    start: RunStart,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, SchedulerError> {
    config.validate()?;
    if endpoints.len() != config.workers {
        return Err(SchedulerError::InvalidCluster(format!(
            "{} endpoints for {} workers",
            endpoints.len(),
            config.workers
        )));
    }
    let RunStart {
        mut state,
        mut history,
        mut best,
    } = start;
    if state.population() != config.population || state.dim() != init.dim() {
        return Err(SchedulerError::InvalidCluster(format!(
            "state has population {} and dimension {}, expected {} and {}",
            state.population(),
            state.dim(),
            config.population,
            init.dim()
        )));
    }
    if history.len() as u64 != state.generation() {
        return Err(SchedulerError::InvalidCluster(format!(
            "{} recorded generations for a state at generation {}",
            history.len(),
            state.generation()
        )));
    }

    let traffic = Arc::new(Traffic::default());
    let (tx, events) = mpsc::channel();
    let mut links = Vec::with_capacity(endpoints.len());
    for (w, endpoint) in endpoints.into_iter().enumerate() {
        let endpoint = counting(endpoint, traffic.clone());
        spawn_reader(w, endpoint.source, tx.clone());
        links.push(Link {
            sink: endpoint.sink,
            alive: true,
        });
    }
    drop(tx);
    let mut cluster = Cluster {
        config,
        hash: config_hash(evaluator, init),
        links,
        events,
    };
    let result = (|| {
        cluster.handshake(&history)?;
        let mut metrics = Vec::new();
        let mut stopped_early = false;
        while state.generation() < config.generations {
            let started = Instant::now();
            let before = traffic.snapshot();
            let mut gen = state.ask()?;
            let id = gen.id();
            let eval_millis = cluster.evaluate(&mut gen)?;
            state.tell(&gen)?;
            let rewards: Vec<f64> = gen.rewards().iter().map(|r| r.expect("complete")).collect();
            cluster.broadcast(id, &rewards);

            let (best_index, &best_reward) = rewards
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, r)| if *r > *acc.1 { (i, r) } else { acc });
            if best.as_ref().is_none_or(|b| best_reward > b.reward) {
                best = Some(BestSeen {
                    reward: best_reward,
                    generation: id,
                    index: best_index,
                    candidate: gen.candidates()[best_index].clone(),
                });
            }
            history.push(rewards.clone());
            let used = traffic.snapshot().since(&before);
            let m = GenerationMetrics {
                generation: id,
                evaluations: (id + 1) * config.population as u64,
                best: best_reward,
                mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
                worst: rewards.iter().copied().fold(f64::INFINITY, f64::min),
                wall_millis: started.elapsed().as_millis() as u64,
                subset_hash: evaluator.subset_hash(id),
                eval_millis,
                payload_bytes: used.payload_bytes,
                frame_bytes: used.frame_bytes,
            };
            let control = observer
                .on_generation(&Progress {
                    state: &state,
                    metrics: &m,
                    rewards: &rewards,
                    best: best.as_ref().expect("set above"),
                    history: &history,
                })
                .map_err(SchedulerError::Observer)?;
            metrics.push(m);
            if control == Control::Stop {
                break;
            }
            if state.is_stalled() {
                log::info!("search stalled at generation {}", state.generation());
                stopped_early = true;
                break;
            }
        }
        Ok(RunReport {
            metrics,
            best,
            final_state: state,
            history,
            stopped_early,
        })
    })();
    cluster.shutdown();
    result
}

/// Runs with `config.workers` in-process worker threads sharing
/// `evaluator`.
pub fn run_in_process(
    config: &ClusterConfig,
    evaluator: Arc<dyn CandidateEvaluator>,
    init: &CmaInit,
    start: RunStart,
    observer: &mut dyn RunObserver,
) -> Result<RunReport, SchedulerError> {
    config.validate()?;
    let mut coordinator_side = Vec::with_capacity(config.workers);
    let mut handles = Vec::with_capacity(config.workers);
    for w in 0..config.workers {
        let (c, worker_side) = in_process_pair();
        coordinator_side.push(c);
        let evaluator = evaluator.clone();
        let init = init.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("worker-{w}"))
                .spawn(move || worker_serve(worker_side, &*evaluator, &init))
                .map_err(|e| SchedulerError::Transport(e.to_string()))?,
        );
    }
    let report = run(config, &*evaluator, init, coordinator_side, start, observer);
    for h in handles {
        match h.join() {
            Ok(Err(e)) => log::debug!("worker ended with: {e}"),
            Err(_) => log::warn!("worker thread panicked"),
            Ok(Ok(_)) => {}
        }
    }
    report
}
