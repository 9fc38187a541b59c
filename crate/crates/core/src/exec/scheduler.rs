//! Pooled task scheduler with dependency-fired activation.
//!
//! The contract is many small tasks, cheap spawn, and continuations that fire
//! when dependencies resolve. Workers pull from one shared queue; a thread
//! that must wait for a cell helps by draining the queue (`help_until`), so a
//! single worker can always make progress on a dependency chain.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::error::{Result, RuntimeError};
use crate::exec::future::FutureCell;
use crate::value::Value;

pub const DEFAULT_GRAIN: usize = 4096;

/// Worker pool size and task granularity knobs.
#[derive(Debug, Clone)]
pub struct SchedulerConfig {
    pub worker_threads: usize,
    /// Minimum elements per subtask when splitting data-parallel kernels.
    pub grain_threshold: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            worker_threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            grain_threshold: DEFAULT_GRAIN,
        }
    }
}

impl SchedulerConfig {
    pub fn new(worker_threads: usize, grain_threshold: usize) -> SchedulerConfig {
        assert!(worker_threads >= 1, "worker_threads must be >= 1");
        assert!(grain_threshold >= 1, "grain_threshold must be >= 1");
        SchedulerConfig { worker_threads, grain_threshold }
    }
}

type Task = Box<dyn FnOnce() + Send>;

struct Core {
    queue: Mutex<VecDeque<Task>>,
    cv: Condvar,
    shutdown: AtomicBool,
    tasks_spawned: AtomicU64,
}

pub struct Scheduler {
    core: Arc<Core>,
    cfg: SchedulerConfig,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Arc<Scheduler> {
        let core = Arc::new(Core {
            queue: Mutex::new(VecDeque::new()),
            cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            tasks_spawned: AtomicU64::new(0),
        });
        let mut workers = Vec::with_capacity(cfg.worker_threads);
        for i in 0..cfg.worker_threads {
            let core = Arc::clone(&core);
            workers.push(
                std::thread::Builder::new()
                    .name(format!("tla-worker-{i}"))
                    .spawn(move || worker_loop(&core))
                    .expect("spawn worker"),
            );
        }
        Arc::new(Scheduler { core, cfg, workers: Mutex::new(workers) })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn grain_threshold(&self) -> usize {
        self.cfg.grain_threshold
    }

    pub fn tasks_spawned(&self) -> u64 {
        self.core.tasks_spawned.load(Ordering::Relaxed)
    }

    fn enqueue(&self, task: Task) {
        let mut q = self.core.queue.lock().unwrap();
        q.push_back(task);
        drop(q);
        self.core.cv.notify_one();
    }

    /// Schedule `body` to run once every dependency has settled. The returned
    /// cell resolves with the body's outcome, or with the first dependency
    /// error (by dependency index); the body is skipped in the error case.
    pub fn spawn<T, F>(self: &Arc<Self>, deps: Vec<FutureCell<Value>>, body: F) -> Result<FutureCell<T>>
    where
        T: Clone + Send + 'static,
        F: FnOnce(Vec<Value>) -> Result<T> + Send + 'static,
    {
        self.spawn_after(deps, body)
    }

    /// `spawn` generalized over the dependency payload type.
    pub fn spawn_after<D, T, F>(
        self: &Arc<Self>,
        deps: Vec<FutureCell<D>>,
        body: F,
    ) -> Result<FutureCell<T>>
    where
        D: Clone + Send + 'static,
        T: Clone + Send + 'static,
        F: FnOnce(Vec<D>) -> Result<T> + Send + 'static,
    {
        if self.core.shutdown.load(Ordering::Acquire) {
            return Err(RuntimeError::SchedulerShutdown);
        }
        self.core.tasks_spawned.fetch_add(1, Ordering::Relaxed);
        let result: FutureCell<T> = FutureCell::pending();
        let sched = Arc::clone(self);
        let out = result.clone();
        let launch = move |deps: Vec<FutureCell<D>>| {
            // All deps settled: first error by index wins, otherwise run.
            let mut values = Vec::with_capacity(deps.len());
            for dep in &deps {
                match dep.try_get().expect("dependency settled") {
                    Ok(v) => values.push(v),
                    Err(e) => {
                        out.resolve(Err(e));
                        return;
                    }
                }
            }
            sched.enqueue(Box::new(move || out.resolve(body(values))));
        };
        if deps.is_empty() {
            launch(deps);
        } else {
            let remaining = Arc::new(std::sync::atomic::AtomicUsize::new(deps.len()));
            let launch = Arc::new(Mutex::new(Some(launch)));
            let all = deps.clone();
            for dep in deps {
                let remaining = Arc::clone(&remaining);
                let launch = Arc::clone(&launch);
                let all = all.clone();
                dep.on_ready(move |_| {
                    if remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
                        let f = launch.lock().unwrap().take().expect("launch once");
                        f(all);
                    }
                });
            }
        }
        Ok(result)
    }

    /// Run queued tasks until `cell` settles. Safe to call from worker
    /// threads: the waiter contributes work instead of blocking, so a
    /// dependency chain completes even with one worker.
    pub fn help_until<T: Clone + Send + 'static>(&self, cell: &FutureCell<T>) -> Result<T> {
        loop {
            if let Some(outcome) = cell.try_get() {
                return outcome;
            }
            let task = {
                let mut q = self.core.queue.lock().unwrap();
                match q.pop_front() {
                    Some(t) => Some(t),
                    None => {
                        // Nothing queued; sleep briefly. Resolution may come
                        // from another thread (e.g. the comm receive loop).
                        let _ = self
                            .core
                            .cv
                            .wait_timeout(q, Duration::from_micros(200))
                            .unwrap();
                        None
                    }
                }
            };
            if let Some(t) = task {
                t();
            }
        }
    }

    pub fn is_shutdown(&self) -> bool {
        self.core.shutdown.load(Ordering::Acquire)
    }

    /// Stop accepting spawns and join the workers. Queued tasks drain first.
    pub fn shutdown(&self) {
        if self.core.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        self.core.cv.notify_all();
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(core: &Core) {
    loop {
        let task = {
            let mut q = core.queue.lock().unwrap();
            loop {
                if let Some(t) = q.pop_front() {
                    break Some(t);
                }
                if core.shutdown.load(Ordering::Acquire) {
                    break None;
                }
                let (guard, _) = core.cv.wait_timeout(q, Duration::from_millis(20)).unwrap();
                q = guard;
            }
        };
        match task {
            Some(t) => t(),
            None => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::future::when_all;

    fn sched(threads: usize) -> Arc<Scheduler> {
        Scheduler::new(SchedulerConfig::new(threads, 64))
    }

    #[test]
    fn spawn_no_deps_resolves() {
        let s = sched(1);
        let c = s.spawn(vec![], |_| Ok(Value::Scalar(3.0))).unwrap();
        assert_eq!(c.wait().unwrap(), Value::Scalar(3.0));
        s.shutdown();
    }

    #[test]
    fn body_runs_after_dependency_resolution() {
        let s = sched(2);
        let gate: FutureCell<Value> = FutureCell::pending();
        let order = Arc::new(Mutex::new(Vec::new()));
        let o = Arc::clone(&order);
        let c = s
            .spawn(vec![gate.clone()], move |vals| {
                o.lock().unwrap().push("body");
                Ok(vals[0].clone())
            })
            .unwrap();
        std::thread::sleep(Duration::from_millis(10));
        order.lock().unwrap().push("resolve");
        gate.resolve(Ok(Value::Scalar(5.0)));
        assert_eq!(c.wait().unwrap(), Value::Scalar(5.0));
        assert_eq!(*order.lock().unwrap(), vec!["resolve", "body"]);
        s.shutdown();
    }

    #[test]
    fn dependency_error_skips_body_first_index_wins() {
        let s = sched(1);
        let a: FutureCell<Value> = FutureCell::failed(RuntimeError::Type("a".into()));
        let b: FutureCell<Value> = FutureCell::failed(RuntimeError::Type("b".into()));
        let ran = Arc::new(AtomicBool::new(false));
        let r = Arc::clone(&ran);
        let c = s
            .spawn(vec![a, b], move |_| {
                r.store(true, Ordering::SeqCst);
                Ok(Value::Scalar(0.0))
            })
            .unwrap();
        match c.wait() {
            Err(RuntimeError::Type(m)) => assert_eq!(m, "a"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(!ran.load(Ordering::SeqCst));
        s.shutdown();
    }

    #[test]
    fn spawn_after_shutdown_is_an_error() {
        let s = sched(1);
        s.shutdown();
        match s.spawn(vec![], |_| Ok(Value::Scalar(0.0))) {
            Err(RuntimeError::SchedulerShutdown) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chain_of_ten_thousand_tasks_matches_sequential_fold() {
        // Sequential oracle: fold of +1 over 10_000 steps.
        let oracle: f64 = (0..10_000).fold(0.0, |acc, _| acc + 1.0);
        for threads in [1, 4] {
            let s = sched(threads);
            let mut cell = s.spawn(vec![], |_| Ok(Value::Scalar(0.0))).unwrap();
            for _ in 0..10_000 {
                cell = s
                    .spawn(vec![cell], |vals| Ok(Value::Scalar(vals[0].as_scalar()? + 1.0)))
                    .unwrap();
            }
            assert_eq!(cell.wait().unwrap(), Value::Scalar(oracle));
            assert!(s.tasks_spawned() >= 10_001);
            s.shutdown();
        }
    }

    #[test]
    fn help_until_makes_progress_on_single_worker() {
        // A worker task that itself waits for subtasks must not deadlock.
        let s = sched(1);
        let s2 = Arc::clone(&s);
        let c = s
            .spawn(vec![], move |_| {
                let subs: Vec<FutureCell<Value>> = (0..8)
                    .map(|i| s2.spawn(vec![], move |_| Ok(Value::Scalar(i as f64))).unwrap())
                    .collect();
                let all = when_all(&subs);
                let vals = s2.help_until(&all)?;
                let total: f64 = vals.iter().map(|v| v.as_scalar().unwrap()).sum();
                Ok(Value::Scalar(total))
            })
            .unwrap();
        assert_eq!(c.wait().unwrap(), Value::Scalar(28.0));
        s.shutdown();
    }
}
