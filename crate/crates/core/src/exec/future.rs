//! Single-assignment future cells with dependency-driven continuations.
//!
//! A `FutureCell` makes exactly one transition out of `Pending`, to either
//! `Ready(value)` or `Error(fault)`. Continuations registered before the
//! transition fire exactly once, immediately after it; continuations
//! registered after it fire inline.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::RuntimeError;

type Outcome<T> = Result<T, RuntimeError>;
type Continuation<T> = Box<dyn FnOnce(&Outcome<T>) + Send>;

enum Slot<T> {
    Pending(Vec<Continuation<T>>),
    Done(Outcome<T>),
}

struct Inner<T> {
    slot: Mutex<Slot<T>>,
    cv: Condvar,
}

pub struct FutureCell<T> {
    inner: Arc<Inner<T>>,
}

impl<T> std::fmt::Debug for FutureCell<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = match &*self.inner.slot.lock().unwrap() {
            Slot::Pending(_) => "pending",
            Slot::Done(Ok(_)) => "ready",
            Slot::Done(Err(_)) => "error",
        };
        write!(f, "FutureCell({state})")
    }
}

impl<T> Clone for FutureCell<T> {
    fn clone(&self) -> Self {
        FutureCell { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Clone + Send + 'static> FutureCell<T> {
    pub fn pending() -> FutureCell<T> {
        FutureCell { inner: Arc::new(Inner { slot: Mutex::new(Slot::Pending(Vec::new())), cv: Condvar::new() }) }
    }

    pub fn ready(value: T) -> FutureCell<T> {
        FutureCell { inner: Arc::new(Inner { slot: Mutex::new(Slot::Done(Ok(value))), cv: Condvar::new() }) }
    }

    pub fn failed(err: RuntimeError) -> FutureCell<T> {
        FutureCell { inner: Arc::new(Inner { slot: Mutex::new(Slot::Done(Err(err))), cv: Condvar::new() }) }
    }

    /// Make the single Pending -> Done transition. Panics on double resolve;
    /// that is a programming error in the runtime, not a recoverable fault.
    pub fn resolve(&self, outcome: Outcome<T>) {
        let (continuations, snapshot) = {
            let mut slot = self.inner.slot.lock().unwrap();
            match &mut *slot {
                Slot::Pending(waiters) => {
                    let waiters = std::mem::take(waiters);
                    let snapshot = if waiters.is_empty() { None } else { Some(outcome.clone()) };
                    *slot = Slot::Done(outcome);
                    self.inner.cv.notify_all();
                    (waiters, snapshot)
                }
                Slot::Done(_) => panic!("FutureCell resolved twice"),
            }
        };
        // Fire outside the critical section so continuations may inspect the
        // cell (or other cells) without deadlocking.
        if let Some(snapshot) = snapshot {
            for k in continuations {
                k(&snapshot);
            }
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(&*self.inner.slot.lock().unwrap(), Slot::Done(_))
    }

    /// Snapshot of the outcome, if resolved.
    pub fn try_get(&self) -> Option<Outcome<T>> {
        match &*self.inner.slot.lock().unwrap() {
            Slot::Done(outcome) => Some(outcome.clone()),
            Slot::Pending(_) => None,
        }
    }

    /// Register a continuation; fires exactly once, after resolution.
    /// Continuations must be cheap and non-blocking (typically: enqueue a
    /// task); they may run on whichever thread resolves the cell.
    pub fn on_ready(&self, f: impl FnOnce(&Outcome<T>) + Send + 'static) {
        let done = {
            let mut slot = self.inner.slot.lock().unwrap();
            match &mut *slot {
                Slot::Pending(waiters) => {
                    waiters.push(Box::new(f));
                    return;
                }
                Slot::Done(outcome) => outcome.clone(),
            }
        };
        f(&done);
    }

    /// Block the calling thread until resolution. Only for threads outside
    /// the worker pool; workers use `Scheduler::help_until`.
    pub fn wait(&self) -> Outcome<T> {
        let mut slot = self.inner.slot.lock().unwrap();
        loop {
            match &*slot {
                Slot::Done(outcome) => return outcome.clone(),
                Slot::Pending(_) => slot = self.inner.cv.wait(slot).unwrap(),
            }
        }
    }

    pub fn wait_timeout(&self, limit: Duration) -> Option<Outcome<T>> {
        let deadline = Instant::now() + limit;
        let mut slot = self.inner.slot.lock().unwrap();
        loop {
            match &*slot {
                Slot::Done(outcome) => return Some(outcome.clone()),
                Slot::Pending(_) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return None;
                    }
                    let (s, _) = self.inner.cv.wait_timeout(slot, deadline - now).unwrap();
                    slot = s;
                }
            }
        }
    }
}

/// Resolve with the values of all inputs, or the first error by input index.
/// An empty input list resolves immediately.
pub fn when_all<T: Clone + Send + 'static>(cells: &[FutureCell<T>]) -> FutureCell<Vec<T>> {
    let result = FutureCell::pending();
    if cells.is_empty() {
        result.resolve(Ok(Vec::new()));
        return result;
    }
    let remaining = Arc::new(std::sync::atomic::AtomicUsize::new(cells.len()));
    let inputs: Arc<Vec<FutureCell<T>>> = Arc::new(cells.to_vec());
    for cell in cells {
        let remaining = Arc::clone(&remaining);
        let inputs = Arc::clone(&inputs);
        let result = result.clone();
        cell.on_ready(move |_| {
            if remaining.fetch_sub(1, std::sync::atomic::Ordering::AcqRel) == 1 {
                let mut values = Vec::with_capacity(inputs.len());
                for input in inputs.iter() {
                    match input.try_get().expect("settled") {
                        Ok(v) => values.push(v),
                        Err(e) => {
                            result.resolve(Err(e));
                            return;
                        }
                    }
                }
                result.resolve(Ok(values));
            }
        });
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ready_fires_inline() {
        let c: FutureCell<i32> = FutureCell::ready(7);
        let hit = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let h = Arc::clone(&hit);
        c.on_ready(move |o| {
            assert_eq!(*o.as_ref().unwrap(), 7);
            h.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        });
        assert_eq!(hit.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    fn continuation_fires_once_after_transition() {
        let c: FutureCell<i32> = FutureCell::pending();
        let hits = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let h = Arc::clone(&hits);
        c.on_ready(move |_| {
            h.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        });
        assert_eq!(hits.load(std::sync::atomic::Ordering::SeqCst), 0);
        c.resolve(Ok(1));
        assert_eq!(hits.load(std::sync::atomic::Ordering::SeqCst), 1);
    }

    #[test]
    #[should_panic(expected = "resolved twice")]
    fn double_resolve_trips_assertion() {
        let c: FutureCell<i32> = FutureCell::pending();
        c.resolve(Ok(1));
        c.resolve(Ok(2));
    }

    #[test]
    fn when_all_empty_is_immediate() {
        let r: FutureCell<Vec<i32>> = when_all(&[]);
        assert_eq!(r.try_get().unwrap().unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn when_all_collects_in_order() {
        let a = FutureCell::pending();
        let b = FutureCell::pending();
        let r = when_all(&[a.clone(), b.clone()]);
        b.resolve(Ok(2));
        assert!(r.try_get().is_none());
        a.resolve(Ok(1));
        assert_eq!(r.try_get().unwrap().unwrap(), vec![1, 2]);
    }

    #[test]
    fn when_all_first_error_by_index_wins() {
        let a: FutureCell<i32> = FutureCell::pending();
        let b: FutureCell<i32> = FutureCell::pending();
        let r = when_all(&[a.clone(), b.clone()]);
        b.resolve(Err(RuntimeError::Type("late".into())));
        a.resolve(Err(RuntimeError::Type("early".into())));
        match r.try_get().unwrap() {
            Err(RuntimeError::Type(msg)) => assert_eq!(msg, "early"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wait_blocks_until_resolution() {
        let c: FutureCell<i32> = FutureCell::pending();
        let c2 = c.clone();
        let t = std::thread::spawn(move || c2.wait().unwrap());
        std::thread::sleep(Duration::from_millis(5));
        c.resolve(Ok(42));
        assert_eq!(t.join().unwrap(), 42);
    }
}
