//! Task granularity: range splitting, canonical-order reductions, and the
//! one-shot grain calibration pass.
//!
//! Reductions never follow the configured grain ranges. They fold fixed-size
//! canonical blocks left-to-right, so a sum is bitwise identical for every
//! `grain_threshold` and worker count; the grain only decides how many blocks
//! each subtask computes.

use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use crate::error::Result;
use crate::exec::future::{when_all, FutureCell};
use crate::exec::scheduler::{Scheduler, SchedulerConfig};
use crate::value::Value;

/// Fixed arithmetic block for floating-point reductions, independent of the
/// configured grain threshold.
pub const REDUCE_BLOCK: usize = 4096;

/// Candidate thresholds probed by the calibration pass.
pub const CALIBRATION_THRESHOLDS: [usize; 4] = [1024, 4096, 16384, 65536];

/// Partition `[0, work_size)` into chunks of `cfg.grain_threshold` elements;
/// only the last chunk may be shorter.
pub fn split_by_grain(work_size: usize, cfg: &SchedulerConfig) -> Vec<Range<usize>> {
    split_ranges(work_size, cfg.grain_threshold)
}

pub fn split_ranges(work_size: usize, threshold: usize) -> Vec<Range<usize>> {
    assert!(threshold >= 1);
    let mut out = Vec::with_capacity(work_size.div_ceil(threshold));
    let mut begin = 0;
    while begin < work_size {
        let end = (begin + threshold).min(work_size);
        out.push(begin..end);
        begin = end;
    }
    out
}

/// Sequential reference reduction: per-block left-to-right sums, block
/// partials folded left-to-right.
pub fn sum_canonical(xs: &[f64]) -> f64 {
    let mut total = 0.0;
    for block in xs.chunks(REDUCE_BLOCK) {
        let mut partial = 0.0;
        for &x in block {
            partial += x;
        }
        total += partial;
    }
    total
}

pub fn max_canonical(xs: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for &x in xs {
        if x > best {
            best = x;
        }
    }
    best
}

/// Shared fan-out driver for element-parallel kernels. `fill` computes the
/// output elements of one range and must not depend on the range boundaries
/// for its arithmetic. With no pool, runs in place.
#[derive(Clone)]
pub struct ExecPool {
    scheduler: Option<Arc<Scheduler>>,
    grain: usize,
}

impl ExecPool {
    pub fn sequential() -> ExecPool {
        ExecPool { scheduler: None, grain: usize::MAX }
    }

    pub fn pooled(scheduler: Arc<Scheduler>, grain: usize) -> ExecPool {
        assert!(grain >= 1);
        ExecPool { scheduler: Some(scheduler), grain }
    }

    pub fn grain(&self) -> usize {
        self.grain
    }

    /// Produce `out_len` elements by evaluating `fill(range)` over grain
    /// ranges and concatenating the chunks in range order.
    pub fn run<F>(&self, out_len: usize, fill: F) -> Result<Vec<f64>>
    where
        F: Fn(Range<usize>) -> Vec<f64> + Send + Sync + 'static,
    {
        match &self.scheduler {
            None => Ok(fill(0..out_len)),
            Some(sched) => {
                let ranges = split_ranges(out_len, self.grain);
                if ranges.len() <= 1 {
                    return Ok(fill(0..out_len));
                }
                let fill = Arc::new(fill);
                let cells: Vec<FutureCell<Value>> = ranges
                    .into_iter()
                    .map(|r| {
                        let fill = Arc::clone(&fill);
                        sched.spawn(vec![], move |_| {
                            Ok(Value::Tensor(crate::value::DenseTensor::from_vec(fill(r))))
                        })
                    })
                    .collect::<Result<_>>()?;
                let all = when_all(&cells);
                let chunks = sched.help_until(&all)?;
                let mut out = Vec::with_capacity(out_len);
                for chunk in chunks {
                    out.extend_from_slice(chunk.as_tensor()?.as_slice());
                }
                Ok(out)
            }
        }
    }

    /// Full reduction with canonical-block arithmetic. Subtasks compute
    /// groups of whole blocks; the final fold is sequential in block order,
    /// so the result is bitwise stable across grain and worker settings.
    pub fn reduce_sum(&self, xs: &[f64]) -> Result<f64> {
        match &self.scheduler {
            None => Ok(sum_canonical(xs)),
            Some(sched) => {
                let blocks = xs.len().div_ceil(REDUCE_BLOCK);
                let blocks_per_task = (self.grain.div_ceil(REDUCE_BLOCK)).max(1);
                if blocks <= blocks_per_task {
                    return Ok(sum_canonical(xs));
                }
                let data: Arc<Vec<f64>> = Arc::new(xs.to_vec());
                let cells: Vec<FutureCell<Value>> = split_ranges(blocks, blocks_per_task)
                    .into_iter()
                    .map(|br| {
                        let data = Arc::clone(&data);
                        sched.spawn(vec![], move |_| {
                            let partials: Vec<f64> = br
                                .clone()
                                .map(|b| {
                                    let lo = b * REDUCE_BLOCK;
                                    let hi = ((b + 1) * REDUCE_BLOCK).min(data.len());
                                    let mut p = 0.0;
                                    for &x in &data[lo..hi] {
                                        p += x;
                                    }
                                    p
                                })
                                .collect();
                            Ok(Value::Tensor(crate::value::DenseTensor::from_vec(partials)))
                        })
                    })
                    .collect::<Result<_>>()?;
                let all = when_all(&cells);
                let groups = sched.help_until(&all)?;
                let mut total = 0.0;
                for group in groups {
                    for &p in group.as_tensor()?.as_slice() {
                        total += p;
                    }
                }
                Ok(total)
            }
        }
    }
}

/// One-shot calibration: time an elementwise kernel at each candidate
/// threshold and return the fastest. A measured stand-in for runtime-adaptive
/// grain control.
pub fn calibrate_grain(scheduler: &Arc<Scheduler>) -> usize {
    const WORK: usize = 1 << 20;
    let input: Vec<f64> = (0..WORK).map(|i| i as f64 * 0.5).collect();
    let input = Arc::new(input);
    let mut best = (f64::INFINITY, CALIBRATION_THRESHOLDS[0]);
    for &threshold in &CALIBRATION_THRESHOLDS {
        let pool = ExecPool::pooled(Arc::clone(scheduler), threshold);
        let data = Arc::clone(&input);
        // Warm-up plus three timed repeats.
        for _ in 0..1 {
            let d = Arc::clone(&data);
            let _ = pool.run(WORK, move |r| r.map(|i| d[i] * 1.0001 + 0.5).collect());
        }
        let t0 = Instant::now();
        for _ in 0..3 {
            let d = Arc::clone(&data);
            let _ = pool.run(WORK, move |r| r.map(|i| d[i] * 1.0001 + 0.5).collect());
        }
        let dt = t0.elapsed().as_secs_f64();
        if dt < best.0 {
            best = (dt, threshold);
        }
    }
    best.1
}
