//! Resilient task execution: replay with corruption detection, or
//! independent replicates compared by checksum, a consensus predicate, or a
//! validate selector.

pub mod checksum;

pub use checksum::{checksum_value, fnv1a64};

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RuntimeError};
use crate::value::Value;

pub type Predicate = Arc<dyn Fn(&Value) -> bool + Send + Sync>;
pub type Selector = Arc<dyn Fn(&[Value]) -> usize + Send + Sync>;

/// How replay mode decides whether a result is corrupted.
#[derive(Clone)]
pub enum ReplayDetector {
    /// Re-execute and compare checksums against the reference run. Without a
    /// corruption injector attached there is nothing this can catch on a
    /// deterministic task, so the plain result is returned after a single
    /// execution.
    ChecksumReference,
    /// User-supplied acceptance predicate over one result.
    Predicate(Predicate),
}

impl fmt::Debug for ReplayDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayDetector::ChecksumReference => write!(f, "ChecksumReference"),
            ReplayDetector::Predicate(_) => write!(f, "Predicate(..)"),
        }
    }
}

/// How replicate mode picks the surviving result.
#[derive(Clone)]
pub enum Comparator {
    /// Largest checksum-equal group wins; the group must have at least two
    /// members (a lone value cannot be told apart from a corruption).
    Checksum,
    /// First replicate (by index) passing the predicate.
    Consensus(Predicate),
    /// Among predicate-passing replicates, the selector picks one.
    Validate { accept: Predicate, select: Selector },
}

impl fmt::Debug for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Comparator::Checksum => write!(f, "Checksum"),
            Comparator::Consensus(_) => write!(f, "Consensus(..)"),
            Comparator::Validate { .. } => write!(f, "Validate(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FaultPolicy {
    Replay { max_attempts: usize, detector: ReplayDetector },
    Replicate { replicas: usize, comparator: Comparator },
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy::Replay { max_attempts: 1, detector: ReplayDetector::ChecksumReference }
    }
}

impl FaultPolicy {
    pub fn replay(max_attempts: usize) -> FaultPolicy {
        assert!(max_attempts >= 1);
        FaultPolicy::Replay { max_attempts, detector: ReplayDetector::ChecksumReference }
    }

    pub fn replicate(replicas: usize, comparator: Comparator) -> FaultPolicy {
        assert!(replicas >= 2);
        FaultPolicy::Replicate { replicas, comparator }
    }

    /// Parse the CLI surface: `replay:N` or `replicate:K:checksum`.
    pub fn parse(text: &str) -> Result<FaultPolicy> {
        let parts: Vec<&str> = text.split(':').collect();
        let bad = || RuntimeError::Type(format!("bad resilience policy `{text}`"));
        match parts.as_slice() {
            ["replay", n] => {
                let n: usize = n.parse().map_err(|_| bad())?;
                if n < 1 {
                    return Err(bad());
                }
                Ok(FaultPolicy::replay(n))
            }
            ["replicate", k, "checksum"] => {
                let k: usize = k.parse().map_err(|_| bad())?;
                if k < 2 {
                    return Err(bad());
                }
                Ok(FaultPolicy::replicate(k, Comparator::Checksum))
            }
            _ => Err(bad()),
        }
    }
}

/// Test-only corruption source: flips one element's sign bit with the given
/// probability per task execution. Never attached on production paths.
pub struct CorruptionInjector {
    mode: InjectMode,
    rng: Mutex<ChaCha8Rng>,
    executions: AtomicU64,
}

enum InjectMode {
    Probability(f64),
    /// Corrupt execution `i` iff `pattern[i % pattern.len()]`.
    Fixed(Vec<bool>),
}

impl CorruptionInjector {
    pub fn with_probability(probability: f64, seed: u64) -> CorruptionInjector {
        assert!((0.0..=1.0).contains(&probability));
        CorruptionInjector {
            mode: InjectMode::Probability(probability),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            executions: AtomicU64::new(0),
        }
    }

    pub fn with_pattern(pattern: Vec<bool>, seed: u64) -> CorruptionInjector {
        assert!(!pattern.is_empty());
        CorruptionInjector {
            mode: InjectMode::Fixed(pattern),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            executions: AtomicU64::new(0),
        }
    }

    pub fn executions(&self) -> u64 {
        self.executions.load(Ordering::Relaxed)
    }

    fn maybe_corrupt(&self, value: &mut Value) {
        let index = self.executions.fetch_add(1, Ordering::Relaxed);
        let mut rng = self.rng.lock().unwrap();
        let corrupt = match &self.mode {
            InjectMode::Probability(p) => rng.random_range(0.0..1.0) < *p,
            InjectMode::Fixed(pattern) => pattern[(index as usize) % pattern.len()],
        };
        if !corrupt {
            return;
        }
        match value {
            Value::Scalar(x) => *x = f64::from_bits(x.to_bits() ^ (1 << 63)),
            Value::Tensor(t) => {
                let mut data = t.as_slice().to_vec();
                if data.is_empty() {
                    return;
                }
                let idx = rng.random_range(0..data.len());
                data[idx] = f64::from_bits(data[idx].to_bits() ^ (1 << 63));
                *t = crate::value::DenseTensor::new(t.shape().clone(), data);
            }
            // Distributed tiles and lists are outside resilient regions.
            _ => {}
        }
    }
}

/// Execute `task` under the policy. The task must be deterministic absent
/// corruption; replicates run as independent executions.
pub fn run_resilient(
    policy: &FaultPolicy,
    injector: Option<&CorruptionInjector>,
    task: &mut dyn FnMut() -> Result<Value>,
) -> Result<Value> {
    let mut execute = || -> Result<Value> {
        let mut v = task()?;
        if let Some(inj) = injector {
            inj.maybe_corrupt(&mut v);
        }
        Ok(v)
    };
    match policy {
        FaultPolicy::Replay { max_attempts, detector } => {
            match detector {
                ReplayDetector::ChecksumReference => {
                    if injector.is_none() {
                        // No corruption channel: the plain result, executed once.
                        return task();
                    }
                    for _ in 0..*max_attempts {
                        let candidate = execute()?;
                        let reference = execute()?;
                        if checksum_value(&candidate)? == checksum_value(&reference)? {
                            return Ok(candidate);
                        }
                    }
                    Err(RuntimeError::ResilienceExhausted { attempts: *max_attempts })
                }
                ReplayDetector::Predicate(accept) => {
                    for _ in 0..*max_attempts {
                        let candidate = execute()?;
                        if accept(&candidate) {
                            return Ok(candidate);
                        }
                    }
                    Err(RuntimeError::ResilienceExhausted { attempts: *max_attempts })
                }
            }
        }
        FaultPolicy::Replicate { replicas, comparator } => {
            let results: Vec<Value> =
                (0..*replicas).map(|_| execute()).collect::<Result<_>>()?;
            match comparator {
                Comparator::Checksum => {
                    let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
                    for (i, v) in results.iter().enumerate() {
                        groups.entry(checksum_value(v)?).or_default().push(i);
                    }
                    // Largest group, ties to the earliest first member.
                    let best = groups
                        .values()
                        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])));
                    match best {
                        Some(group) if group.len() >= 2 => Ok(results[group[0]].clone()),
                        _ => Err(RuntimeError::ResilienceExhausted { attempts: *replicas }),
                    }
                }
                Comparator::Consensus(accept) => results
                    .iter()
                    .find(|v| accept(v))
                    .cloned()
                    .ok_or(RuntimeError::ResilienceExhausted { attempts: *replicas }),
                Comparator::Validate { accept, select } => {
                    let passing: Vec<Value> =
                        results.into_iter().filter(|v| accept(v)).collect();
                    if passing.is_empty() {
                        return Err(RuntimeError::ResilienceExhausted { attempts: *replicas });
                    }
                    let idx = select(&passing).min(passing.len() - 1);
                    Ok(passing[idx].clone())
                }
            }
        }
    }
}
