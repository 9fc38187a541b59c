//! Performance counters: per-primitive invocation counts and cumulative
//! time, task/envelope/frame/byte totals, and the CSV export consumed by
//! external chart tooling.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Result, RuntimeError};

#[derive(Default)]
pub struct Counters {
    pub envelopes_sent: AtomicU64,
    pub frames_sent: AtomicU64,
    pub bytes_sent: AtomicU64,
    pub collectives_completed: AtomicU64,
    prims: Mutex<BTreeMap<String, (u64, u64)>>,
}

impl Counters {
    pub fn new() -> Counters {
        Counters::default()
    }

    pub fn record_prim(&self, name: &str, elapsed: Duration) {
        let mut prims = self.prims.lock().unwrap();
        let entry = prims.entry(name.to_string()).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += elapsed.as_nanos() as u64;
    }

    pub fn add_envelope(&self) {
        self.envelopes_sent.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_frame(&self, bytes: usize) {
        self.frames_sent.fetch_add(1, Ordering::Relaxed);
        self.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn add_collective(&self) {
        self.collectives_completed.fetch_add(1, Ordering::Relaxed);
    }

    /// Snapshot into a report. `tasks_spawned` and wall time are owned by the
    /// caller (scheduler / run loop).
    pub fn report(&self, tasks_spawned: u64, wall: Duration) -> CounterReport {
        let mut entries = BTreeMap::new();
        entries.insert("bytes_sent".to_string(), self.bytes_sent.load(Ordering::Relaxed));
        entries.insert(
            "collectives_completed".to_string(),
            self.collectives_completed.load(Ordering::Relaxed),
        );
        entries.insert("envelopes_sent".to_string(), self.envelopes_sent.load(Ordering::Relaxed));
        entries.insert("frames_sent".to_string(), self.frames_sent.load(Ordering::Relaxed));
        entries.insert("tasks_spawned".to_string(), tasks_spawned);
        entries.insert("wall_time_ns".to_string(), wall.as_nanos() as u64);
        for (name, (calls, ns)) in self.prims.lock().unwrap().iter() {
            entries.insert(format!("prim.{name}.calls"), *calls);
            entries.insert(format!("prim.{name}.ns"), *ns);
        }
        CounterReport { entries }
    }
}

/// Immutable snapshot of one locality's counters (or a merged job view).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CounterReport {
    pub entries: BTreeMap<String, u64>,
}

impl CounterReport {
    pub fn get(&self, key: &str) -> u64 {
        self.entries.get(key).copied().unwrap_or(0)
    }

    /// Merge per-locality reports: counts sum, wall time takes the maximum.
    pub fn merge(reports: &[CounterReport]) -> CounterReport {
        let mut entries: BTreeMap<String, u64> = BTreeMap::new();
        for r in reports {
            for (k, v) in &r.entries {
                if k == "wall_time_ns" {
                    let slot = entries.entry(k.clone()).or_insert(0);
                    *slot = (*slot).max(*v);
                } else {
                    *entries.entry(k.clone()).or_insert(0) += v;
                }
            }
        }
        CounterReport { entries }
    }

    /// CSV with header `counter,value`; rows in deterministic (sorted) order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("counter,value\n");
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push(',');
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<CounterReport> {
        let mut lines = text.lines();
        match lines.next() {
            Some("counter,value") => {}
            other => {
                return Err(RuntimeError::Io(format!("bad counter header: {other:?}")));
            }
        }
        let mut entries = BTreeMap::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .rsplit_once(',')
                .ok_or_else(|| RuntimeError::Io(format!("bad counter row `{line}`")))?;
            let v: u64 =
                v.parse().map_err(|_| RuntimeError::Io(format!("bad counter value `{line}`")))?;
            entries.insert(k.to_string(), v);
        }
        Ok(CounterReport { entries })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<CounterReport> {
        CounterReport::from_csv(&std::fs::read_to_string(path)?)
    }

    /// Serialized form for merging counters across localities at shutdown.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_csv().into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CounterReport> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| RuntimeError::Io(format!("counter bytes not utf-8: {e}")))?;
        CounterReport::from_csv(text)
    }
}
