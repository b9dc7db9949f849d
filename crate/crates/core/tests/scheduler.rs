//! Coordinator/worker behaviour over in-process and TCP links.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use sves_core::fitness::BenchmarkFn;
use sves_core::scheduler::transport::{accept_workers, connect_with_retry, in_process_pair, Endpoint, FrameSink};
use sves_core::scheduler::wire::WireError;
use sves_core::scheduler::{
    run, run_in_process, worker_serve, BenchmarkObjective, CandidateEvaluator, ClusterConfig, CmaInit, Delayed,
    RunReport, RunStart, SchedulerError, WorkerReport,
};

const RASTRIGIN: BenchmarkObjective = BenchmarkObjective(BenchmarkFn::Rastrigin);

fn init(dim: usize, population: usize) -> CmaInit {
    CmaInit {
        sigma0: 0.8,
        population,
        seed: 2024,
        mean: vec![1.5; dim],
    }
}

/// Plain ask/evaluate/tell loop without any transport.
fn single_process(init: &CmaInit, evaluator: &dyn CandidateEvaluator, generations: u64) -> (Vec<u8>, Vec<Vec<f64>>) {
    let mut state = init.state().unwrap();
    let mut history = Vec::new();
    for g in 0..generations {
        let mut gen = state.ask().unwrap();
        let rewards: Vec<f64> = (0..gen.len())
            .map(|i| evaluator.evaluate(g, i, &gen.candidates()[i]).unwrap())
            .collect();
        for (i, r) in rewards.iter().enumerate() {
            gen.set_reward(i, *r);
        }
        state.tell(&gen).unwrap();
        history.push(rewards);
    }
    (state.checkpoint(), history)
}

fn run_workers(config: &ClusterConfig, evaluator: Arc<dyn CandidateEvaluator>, init: &CmaInit) -> RunReport {
    run_in_process(config, evaluator, init, RunStart::fresh(init).unwrap(), &mut ()).unwrap()
}

fn spawn_worker(
    endpoint: Endpoint,
    evaluator: Arc<dyn CandidateEvaluator>,
    init: CmaInit,
) -> std::thread::JoinHandle<Result<WorkerReport, SchedulerError>> {
    std::thread::spawn(move || worker_serve(endpoint, &*evaluator, &init))
}

#[test]
fn worker_count_does_not_change_the_run() {
    let init = init(6, 24);
    let (oracle, oracle_history) = single_process(&init, &RASTRIGIN, 12);
    for workers in [1, 2, 3, 4, 6, 8] {
        let report = run_workers(&ClusterConfig::new(24, workers, 12), Arc::new(RASTRIGIN), &init);
        assert_eq!(report.history, oracle_history, "N={workers}");
        assert_eq!(report.final_state.checkpoint(), oracle, "N={workers}");
        assert_eq!(report.metrics.len(), 12);
        assert_eq!(report.metrics[11].evaluations, 12 * 24);
    }
}

#[test]
fn payload_bytes_do_not_depend_on_dimension() {
    let small = run_workers(&ClusterConfig::new(8, 2, 3), Arc::new(RASTRIGIN), &init(4, 8));
    let large = run_workers(&ClusterConfig::new(8, 2, 3), Arc::new(RASTRIGIN), &init(300, 8));
    let bytes = |r: &RunReport| r.metrics.iter().map(|m| m.payload_bytes).collect::<Vec<_>>();
    assert_eq!(bytes(&small), bytes(&large));
    // Per candidate: one job (52), one report (32), one broadcast report per worker (32 each).
    assert_eq!(bytes(&small)[0], 8 * (52 + 32 + 2 * 32));
}

#[test]
fn every_job_lands_on_its_contiguous_block() {
    struct Recorder(std::sync::Mutex<Vec<(std::thread::ThreadId, usize)>>);
    impl CandidateEvaluator for Recorder {
        fn evaluate(&self, _: u64, index: usize, x: &[f64]) -> Result<f64, String> {
            self.0.lock().unwrap().push((std::thread::current().id(), index));
            Ok(BenchmarkFn::Sphere.reward(x))
        }
        fn digest(&self) -> [u8; 32] {
            [1; 32]
        }
    }
    let recorder = Arc::new(Recorder(Default::default()));
    run_workers(&ClusterConfig::new(12, 3, 1), recorder.clone(), &init(3, 12));
    let seen = recorder.0.lock().unwrap().clone();
    assert_eq!(seen.len(), 12);
    for block in [0..4, 4..8, 8..12] {
        let owner = seen.iter().find(|(_, i)| *i == block.start).unwrap().0;
        assert!(seen.iter().filter(|(_, i)| block.contains(i)).all(|(t, _)| *t == owner));
    }
}

#[test]
fn makespan_follows_the_partition_bound() {
    let delay = Duration::from_millis(40);
    let evaluator = Arc::new(Delayed {
        inner: RASTRIGIN,
        delay,
    });
    let started = Instant::now();
    run_workers(&ClusterConfig::new(12, 3, 2), evaluator, &init(3, 12));
    let elapsed = started.elapsed();
    // Two generations of ceil(12 / 3) sequential evaluations on each worker.
    let bound = delay * 8;
    assert!(elapsed >= bound, "{elapsed:?}");
    assert!(elapsed < bound * 2, "{elapsed:?}");
}

/// Sink that flips one payload bit in the `nth` frame it sends.
struct Corrupting {
    inner: Box<dyn FrameSink>,
    sent: usize,
    nth: usize,
}

impl FrameSink for Corrupting {
    fn send(&mut self, frame: &[u8]) -> Result<(), WireError> {
        self.sent += 1;
        let mut frame = frame.to_vec();
        if self.sent == self.nth && frame.len() > 12 {
            frame[12] ^= 0x10;
        }
        self.inner.send(&frame)
    }

    fn close(&mut self) {
        self.inner.close();
    }
}

#[test]
fn corrupted_frame_drops_the_worker_and_reschedules() {
    let init = init(5, 12);
    let (oracle, _) = single_process(&init, &RASTRIGIN, 4);
    let mut coordinator_side = Vec::new();
    let mut handles = Vec::new();
    for w in 0..3 {
        let (c, mut worker) = in_process_pair();
        if w == 1 {
            // Frame 1 is the Hello; frame 3 is the second reward report.
            worker.sink = Box::new(Corrupting {
                inner: worker.sink,
                sent: 0,
                nth: 3,
            });
        }
        coordinator_side.push(c);
        handles.push(spawn_worker(worker, Arc::new(RASTRIGIN), init.clone()));
    }
    let report = run(
        &ClusterConfig::new(12, 3, 4),
        &RASTRIGIN,
        &init,
        coordinator_side,
        RunStart::fresh(&init).unwrap(),
        &mut (),
    )
    .unwrap();
    assert_eq!(report.final_state.checkpoint(), oracle);
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(results[1].is_err());
    assert_eq!(results[0].as_ref().unwrap().generation, 4);
    assert_eq!(results[2].as_ref().unwrap().generation, 4);
}

/// Panics once on a chosen candidate, then behaves.
struct FlakyOnce {
    tripped: AtomicBool,
}

impl CandidateEvaluator for FlakyOnce {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String> {
        if generation == 1 && index == 2 && !self.tripped.swap(true, Ordering::SeqCst) {
            panic!("simulated evaluator crash");
        }
        RASTRIGIN.evaluate(generation, index, x)
    }

    fn digest(&self) -> [u8; 32] {
        RASTRIGIN.digest()
    }
}

#[test]
fn panicking_evaluation_is_rescheduled() {
    let init = init(4, 8);
    let (oracle, _) = single_process(&init, &RASTRIGIN, 3);
    let flaky = Arc::new(FlakyOnce {
        tripped: AtomicBool::new(false),
    });
    let report = run_workers(&ClusterConfig::new(8, 2, 3), flaky.clone(), &init);
    assert!(flaky.tripped.load(Ordering::SeqCst));
    assert_eq!(report.final_state.checkpoint(), oracle);
}

/// Always fails one candidate.
struct Broken;

impl CandidateEvaluator for Broken {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String> {
        if index == 5 {
            return Err("cannot score".into());
        }
        RASTRIGIN.evaluate(generation, index, x)
    }

    fn digest(&self) -> [u8; 32] {
        [9; 32]
    }
}

#[test]
fn repeated_failure_fails_the_generation() {
    let init = init(4, 8);
    let err = run_in_process(
        &ClusterConfig::new(8, 2, 3),
        Arc::new(Broken),
        &init,
        RunStart::fresh(&init).unwrap(),
        &mut (),
    )
    .unwrap_err();
    assert!(matches!(err, SchedulerError::GenerationFailed { generation: 0, .. }), "{err}");
}

#[test]
fn mismatched_workers_are_rejected() {
    let good = init(4, 8);
    let mut other = good.clone();
    other.seed += 1;

    // Every worker disagrees: the run cannot start.
    let (c, w) = in_process_pair();
    let handle = spawn_worker(w, Arc::new(RASTRIGIN), other.clone());
    let err = run(
        &ClusterConfig::new(8, 1, 2),
        &RASTRIGIN,
        &good,
        vec![c],
        RunStart::fresh(&good).unwrap(),
        &mut (),
    )
    .unwrap_err();
    assert!(matches!(err, SchedulerError::ConfigMismatch), "{err}");
    assert!(matches!(handle.join().unwrap(), Err(SchedulerError::ConfigMismatch)));

    // One of two disagrees: the other carries the run.
    let (oracle, _) = single_process(&good, &RASTRIGIN, 2);
    let (c0, w0) = in_process_pair();
    let (c1, w1) = in_process_pair();
    let h0 = spawn_worker(w0, Arc::new(RASTRIGIN), good.clone());
    let h1 = spawn_worker(w1, Arc::new(RASTRIGIN), other);
    let report = run(
        &ClusterConfig::new(8, 2, 2),
        &RASTRIGIN,
        &good,
        vec![c0, c1],
        RunStart::fresh(&good).unwrap(),
        &mut (),
    )
    .unwrap();
    assert_eq!(report.final_state.checkpoint(), oracle);
    assert_eq!(h0.join().unwrap().unwrap().jobs, 16);
    assert!(matches!(h1.join().unwrap(), Err(SchedulerError::ConfigMismatch)));
}

/// Sleeps far past the job timeout on its first evaluation.
struct Hangs {
    calls: AtomicUsize,
}

impl CandidateEvaluator for Hangs {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String> {
        if self.calls.fetch_add(1, Ordering::SeqCst) == 0 {
            std::thread::sleep(Duration::from_secs(3));
        }
        RASTRIGIN.evaluate(generation, index, x)
    }

    fn digest(&self) -> [u8; 32] {
        RASTRIGIN.digest()
    }
}

#[test]
fn timed_out_worker_is_replaced() {
    let init = init(4, 8);
    let (oracle, _) = single_process(&init, &RASTRIGIN, 2);
    let (c0, w0) = in_process_pair();
    let (c1, w1) = in_process_pair();
    spawn_worker(w0, Arc::new(Hangs { calls: AtomicUsize::new(0) }), init.clone());
    let healthy = spawn_worker(w1, Arc::new(RASTRIGIN), init.clone());
    let mut config = ClusterConfig::new(8, 2, 2);
    config.job_timeout = Duration::from_millis(300);
    let started = Instant::now();
    let report = run(&config, &RASTRIGIN, &init, vec![c0, c1], RunStart::fresh(&init).unwrap(), &mut ()).unwrap();
    assert!(started.elapsed() < Duration::from_secs(3));
    assert_eq!(report.final_state.checkpoint(), oracle);
    assert_eq!(healthy.join().unwrap().unwrap().jobs, 16);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let init = init(5, 8);
    let full = run_workers(&ClusterConfig::new(8, 2, 6), Arc::new(RASTRIGIN), &init);
    let first = run_workers(&ClusterConfig::new(8, 2, 3), Arc::new(RASTRIGIN), &init);
    let mut history = first.history.clone();
    // A line written after the checkpoint is ignored.
    history.push(vec![0.0; 8]);
    let start = RunStart::resume(&init, &first.final_state.checkpoint(), history).unwrap();
    assert_eq!(start.best, first.best);
    let rest = run_in_process(&ClusterConfig::new(8, 4, 6), Arc::new(RASTRIGIN), &init, start, &mut ()).unwrap();
    assert_eq!(rest.final_state.checkpoint(), full.final_state.checkpoint());
    assert_eq!(rest.history, full.history);
    assert_eq!(rest.best, full.best);
}

#[test]
fn tcp_transport_matches_in_process() {
    let init = init(5, 8);
    let (oracle, _) = single_process(&init, &RASTRIGIN, 3);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let workers: Vec<_> = (0..2)
        .map(|_| {
            let init = init.clone();
            std::thread::spawn(move || {
                let endpoint = connect_with_retry(addr, 10, Duration::from_millis(20)).unwrap();
                worker_serve(endpoint, &RASTRIGIN, &init)
            })
        })
        .collect();
    let endpoints = accept_workers(&listener, 2, Duration::from_secs(10)).unwrap();
    let report = run(
        &ClusterConfig::new(8, 2, 3),
        &RASTRIGIN,
        &init,
        endpoints,
        RunStart::fresh(&init).unwrap(),
        &mut (),
    )
    .unwrap();
    assert_eq!(report.final_state.checkpoint(), oracle);
    for w in workers {
        assert_eq!(w.join().unwrap().unwrap().generation, 3);
    }
}

#[test]
fn resume_rejects_foreign_history() {
    let init = init(3, 8);
    let report = run_workers(&ClusterConfig::new(8, 2, 2), Arc::new(RASTRIGIN), &init);
    let checkpoint = report.final_state.checkpoint();
    let mut tampered = report.history.clone();
    tampered[1][3] += 1.0;
    tampered[1].swap(0, 7);
    assert!(matches!(RunStart::resume(&init, &checkpoint, tampered), Err(SchedulerError::Resume(_))));
    let short = report.history[..1].to_vec();
    assert!(matches!(RunStart::resume(&init, &checkpoint, short), Err(SchedulerError::Resume(_))));
}
