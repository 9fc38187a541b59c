//! Forward-pass scaling benchmark over the reference CNN: one batch tiled
//! on the sample axis, P thread-hosted localities, warm repeats. The
//! measured region is the forward pass (plus the loss reduction that
//! completes it); data generation and setup are excluded.

use std::time::Instant;

use crate::dl::{forward_loss, reference_cnn4, synthetic_batch, DistBatch};
use crate::dl::{CNN4_CHANNELS, CNN4_CLASSES, CNN4_LENGTH};
use crate::error::{Result, RuntimeError};
use crate::runtime::{barrier, spmd_run, RunSettings, TransportKind};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub localities: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

/// Time the reference-model forward pass over `batch_size` samples for each
/// world size in `p_list`. One warm-up iteration is excluded; `repeats`
/// timed iterations follow. Localities default to one worker thread each so
/// scaling comes from the job size.
pub fn bench_scaling(
    batch_size: usize,
    p_list: &[usize],
    repeats: usize,
    seed: u64,
    threads_per_locality: usize,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(RuntimeError::Type(format!("repeats must be >= 3, got {repeats}")));
    }
    let mut rows = Vec::with_capacity(p_list.len());
    for &p in p_list {
        let settings = RunSettings {
            localities: p,
            worker_threads: threads_per_locality.max(1),
            seed,
            ..Default::default()
        };
        let samples = spmd_run(&settings, TransportKind::InProc, move |env| {
            let model = reference_cnn4(seed);
            let batch = synthetic_batch(seed + 1, batch_size, CNN4_CHANNELS, CNN4_LENGTH, CNN4_CLASSES);
            let dist = DistBatch::tile("bench", &batch, env.world(), env.rank())?;
            drop(batch);
            let local = dist.local_batch();
            let pool = env.pool();
            let mut times = Vec::with_capacity(repeats);
            for iter in 0..repeats + 1 {
                barrier(&env, iter as u64)?;
                let t0 = Instant::now();
                let loss = forward_loss(&model, &local, &pool)?;
                let reduced =
                    crate::dl::distributed_loss(loss, &dist, &env.comm, super::step_tag_base(1000 + iter as u64));
                let global = env.scheduler.help_until(&reduced)?.as_slice()[0];
                assert!(global.is_finite());
                if iter > 0 {
                    times.push(t0.elapsed().as_secs_f64()); // iter 0 is warm-up
                }
            }
            Ok(times)
        })?;
        // Rank 0's timings characterize the job (the loss reduction makes
        // every iteration a cross-locality completion point).
        let times = &samples[0];
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
        rows.push(BenchRow { localities: p, mean_seconds: mean, std_seconds: var.sqrt() });
    }
    Ok(rows)
}

/// CSV with header `p,mean_seconds,std_seconds`.
pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("p,mean_seconds,std_seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.localities, r.mean_seconds, r.std_seconds));
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("p,mean_seconds,std_seconds") => {}
        other => return Err(RuntimeError::Io(format!("bad bench header: {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 3 {
                return Err(RuntimeError::Io(format!("bad bench row `{l}`")));
            }
            Ok(BenchRow {
                localities: fields[0]
                    .parse()
                    .map_err(|_| RuntimeError::Io(format!("bad bench row `{l}`")))?,
                mean_seconds: fields[1]
                    .parse()
                    .map_err(|_| RuntimeError::Io(format!("bad bench row `{l}`")))?,
                std_seconds: fields[2]
                    .parse()
                    .map_err(|_| RuntimeError::Io(format!("bad bench row `{l}`")))?,
            })
        })
        .collect()
}
