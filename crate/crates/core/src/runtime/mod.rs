//! The per-locality runtime environment and SPMD job harnesses.
//!
//! Every locality runs a structurally equivalent program against its own
//! environment: a scheduler, a comm endpoint, the shared primitive registry,
//! and counters. Jobs can host localities as threads in one process
//! (in-process channels or a local TCP mesh) or as one locality per process
//! over sockets.

pub mod bench;
pub mod builtins;

pub use bench::{bench_scaling, rows_from_csv, rows_to_csv, BenchRow};
pub use builtins::default_registry;

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::comm::{
    bind_local_mesh, in_proc_fabric, socket_endpoint, CommHandle, FusionConfig, LocalityId,
    TAG_INTERNAL_BIT,
};
use crate::counters::{CounterReport, Counters};
use crate::error::{Result, RuntimeError};
use crate::exec::{evaluate, ExecPool, Registry, Scheduler, SchedulerConfig, DEFAULT_GRAIN};
use crate::lang::{compile_source, FrontendError};
use crate::resilience::{CorruptionInjector, FaultPolicy};
use crate::value::Value;

/// Tag namespaces inside the runtime-internal bit: expression nodes,
/// data-parallel steps, and the final counter merge.
pub fn node_tag(node: usize, slot: u8) -> u64 {
    TAG_INTERNAL_BIT | (1 << 56) | ((node as u64) << 8) | slot as u64
}

pub fn step_tag_base(step: u64) -> u64 {
    TAG_INTERNAL_BIT | (2 << 56) | (step << 16)
}

pub const MERGE_TAG: u64 = TAG_INTERNAL_BIT | (3 << 56);
pub const BARRIER_TAG_BASE: u64 = TAG_INTERNAL_BIT | (4 << 56);

/// The runtime environment one locality evaluates against.
pub struct Env {
    pub locality: LocalityId,
    pub scheduler: Arc<Scheduler>,
    pub comm: Arc<CommHandle>,
    pub registry: Arc<Registry>,
    pub counters: Arc<Counters>,
    pub seed: u64,
    pub resilience: Option<FaultPolicy>,
    /// Test-only corruption hook; never attached on production paths.
    pub injector: Option<Arc<CorruptionInjector>>,
}

impl Env {
    pub fn pool(&self) -> ExecPool {
        ExecPool::pooled(Arc::clone(&self.scheduler), self.scheduler.grain_threshold())
    }

    pub fn rank(&self) -> usize {
        self.locality.rank
    }

    pub fn world(&self) -> usize {
        self.locality.world
    }

    pub fn shutdown(&self) {
        self.comm.shutdown();
        self.scheduler.shutdown();
    }
}

/// Job-level knobs shared by every locality.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub localities: usize,
    pub worker_threads: usize,
    pub grain_threshold: usize,
    pub fusion: FusionConfig,
    pub seed: u64,
    pub resilience: Option<FaultPolicy>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            localities: 1,
            worker_threads: 2,
            grain_threshold: DEFAULT_GRAIN,
            fusion: FusionConfig::default(),
            seed: 0,
            resilience: None,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum RunError {
    #[error("{0}")]
    Frontend(#[from] FrontendError),
    #[error("{0}")]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProc,
    /// TCP mesh over loopback, localities still hosted as threads.
    SocketLocal,
}

fn build_env(
    id: LocalityId,
    transport: Arc<dyn crate::comm::Transport>,
    ingress: std::sync::mpsc::Receiver<Vec<u8>>,
    settings: &RunSettings,
) -> Arc<Env> {
    let counters = Arc::new(Counters::new());
    let scheduler = Scheduler::new(SchedulerConfig::new(
        settings.worker_threads,
        settings.grain_threshold,
    ));
    let comm = CommHandle::new(
        id,
        transport,
        ingress,
        settings.fusion.clone(),
        Arc::clone(&scheduler),
        Arc::clone(&counters),
    );
    Arc::new(Env {
        locality: id,
        scheduler,
        comm,
        registry: Arc::new(default_registry()),
        counters,
        seed: settings.seed,
        resilience: settings.resilience.clone(),
        injector: None,
    })
}

/// Host a `world`-locality SPMD job as threads and run `body` on each.
/// The body must be symmetric (every locality enters the same collectives).
pub fn spmd_run<T, F>(
    settings: &RunSettings,
    transport: TransportKind,
    body: F,
) -> Result<Vec<T>>
where
    T: Send + 'static,
    F: Fn(Arc<Env>) -> Result<T> + Send + Sync + 'static,
{
    let world = settings.localities;
    assert!(world >= 1);
    let endpoints: Vec<crate::comm::transport::Endpoint> = match transport {
            TransportKind::InProc => in_proc_fabric(world),
            TransportKind::SocketLocal => {
                let (addrs, listeners) =
                    bind_local_mesh(world).map_err(|e| RuntimeError::Io(e.to_string()))?;
                // Mesh setup blocks per rank, so endpoints are built on their
                // own threads.
                let mut joins = Vec::new();
                for (rank, listener) in listeners.into_iter().enumerate() {
                    let addrs = addrs.clone();
                    joins.push(std::thread::spawn(move || {
                        socket_endpoint(listener, rank, world, &addrs, Duration::from_secs(20))
                    }));
                }
                joins
                    .into_iter()
                    .map(|j| j.join().expect("mesh thread"))
                    .collect::<Result<Vec<_>>>()?
            }
        };

    let body = Arc::new(body);
    let mut threads = Vec::with_capacity(world);
    for (rank, (transport, ingress)) in endpoints.into_iter().enumerate() {
        let settings = settings.clone();
        let body = Arc::clone(&body);
        threads.push(
            std::thread::Builder::new()
                .name(format!("tla-loc-{rank}"))
                .spawn(move || {
                    let env = build_env(LocalityId::new(rank, world), transport, ingress, &settings);
                    // A panicking locality must still poison its peers, or
                    // they hang in half-entered collectives.
                    let out = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                        body(Arc::clone(&env))
                    })) {
                        Ok(out) => out,
                        Err(payload) => {
                            let msg = payload
                                .downcast_ref::<&str>()
                                .map(|s| s.to_string())
                                .or_else(|| payload.downcast_ref::<String>().cloned())
                                .unwrap_or_else(|| "panic".into());
                            Err(RuntimeError::Type(format!("locality {rank} panicked: {msg}")))
                        }
                    };
                    if let Err(e) = &out {
                        env.comm.poison_peers(&format!("locality {rank} aborted: {e}"));
                    }
                    env.comm.quiesce();
                    env.shutdown();
                    out
                })
                .expect("spawn locality"),
        );
    }
    threads
        .into_iter()
        .map(|t| t.join().expect("locality thread"))
        .collect()
}

/// Build the environment for one externally launched socket locality.
pub fn socket_env(
    rank: usize,
    world: usize,
    addrs: &[std::net::SocketAddr],
    settings: &RunSettings,
) -> Result<Arc<Env>> {
    let listener = std::net::TcpListener::bind(addrs[rank])
        .map_err(|e| RuntimeError::TransportDown(format!("bind {}: {e}", addrs[rank])))?;
    let (transport, ingress) =
        socket_endpoint(listener, rank, world, addrs, Duration::from_secs(30))?;
    Ok(build_env(LocalityId::new(rank, world), transport, ingress, settings))
}

/// Everything one locality produces from a run.
#[derive(Debug, Clone)]
pub struct LocalityOutcome {
    pub value: Value,
    /// Rank 0 carries the job-wide merged report; other ranks their own.
    pub report: CounterReport,
}

/// Compile and evaluate a script in this environment; the program value.
pub fn execute_source(env: &Arc<Env>, source: &str) -> Result<Value, RunError> {
    let tree = Arc::new(compile_source(source, &env.registry)?);
    let root = evaluate(&tree, env);
    Ok(root.wait()?)
}

/// Gather per-locality counter reports; rank 0 resolves with the merged job
/// view, other ranks with their own.
pub fn merge_counters(env: &Arc<Env>, wall: Duration) -> Result<CounterReport> {
    let report = env.counters.report(env.scheduler.tasks_spawned(), wall);
    if env.world() == 1 {
        return Ok(report);
    }
    let gathered = env.comm.all_gather_bytes(report.to_bytes(), MERGE_TAG);
    let all = gathered.wait()?;
    if env.rank() == 0 {
        let reports: Vec<CounterReport> =
            all.iter().map(|b| CounterReport::from_bytes(b)).collect::<Result<_>>()?;
        Ok(CounterReport::merge(&reports))
    } else {
        Ok(report)
    }
}

/// Run a script SPMD over thread-hosted localities and collect every
/// locality's outcome (rank order).
pub fn run_source(
    source: &str,
    settings: &RunSettings,
    transport: TransportKind,
) -> Result<Vec<LocalityOutcome>, RunError> {
    // Surface lex/parse/compile diagnostics before spawning the job.
    compile_source(source, &default_registry())?;
    let source = source.to_string();
    let outcomes = spmd_run(settings, transport, move |env| {
        let t0 = Instant::now();
        let value = match execute_source(&env, &source) {
            Ok(v) => v,
            Err(RunError::Runtime(e)) => return Err(e),
            Err(RunError::Frontend(e)) => return Err(RuntimeError::Type(e.to_string())),
        };
        let report = merge_counters(&env, t0.elapsed())?;
        Ok(LocalityOutcome { value, report })
    })?;
    Ok(outcomes)
}

/// Run one socket-hosted locality of a script job to completion.
pub fn run_source_socket_locality(
    source: &str,
    rank: usize,
    world: usize,
    addrs: &[std::net::SocketAddr],
    settings: &RunSettings,
) -> Result<LocalityOutcome, RunError> {
    let env = socket_env(rank, world, addrs, settings)?;
    let t0 = Instant::now();
    let result = execute_source(&env, source);
    let outcome = match result {
        Ok(value) => match merge_counters(&env, t0.elapsed()) {
            Ok(report) => Ok(LocalityOutcome { value, report }),
            Err(e) => {
                env.comm.poison_peers(&format!("locality {rank} aborted: {e}"));
                Err(e.into())
            }
        },
        Err(e) => {
            env.comm.poison_peers(&format!("locality {rank} aborted: {e}"));
            Err(e)
        }
    };
    env.comm.quiesce();
    env.shutdown();
    outcome
}

/// Tagging barrier used by harness code: an all-reduce of one scalar.
pub fn barrier(env: &Arc<Env>, instance: u64) -> Result<()> {
    let cell = env.comm.all_reduce(
        &crate::value::DenseTensor::from_vec(vec![1.0]),
        crate::comm::ReduceOp::Sum,
        BARRIER_TAG_BASE | instance,
    );
    cell.wait()?;
    Ok(())
}
