//! Distributed execution strategies: synchronous data-parallel steps over
//! batch-tiled samples, and spatially parallel convolution over
//! length-tiled inputs with overlapped tiling.

use std::sync::Arc;

use crate::comm::{CommHandle, ReduceOp, TAG_INTERNAL_BIT};
use crate::dist::tiling::{tiled_meta, ArrayMeta, TileSpan};
use crate::dist::DistArray;
use crate::dl::model::{
    backward_pass, forward_pass, sgd_step, Batch, ModelGrads, ModelSpec, SolverConfig,
};
use crate::error::{Result, RuntimeError};
use crate::exec::{ExecPool, FutureCell};
use crate::value::{DenseTensor, Shape};

/// A minibatch tiled on the sample axis: features and labels share the
/// same sample spans.
#[derive(Debug, Clone, PartialEq)]
pub struct DistBatch {
    pub features: DistArray,
    pub labels: DistArray,
}

impl DistBatch {
    /// Tile a replicated dense batch across the job on the sample axis.
    pub fn tile(name: &str, batch: &Batch, world: usize, owner: usize) -> Result<DistBatch> {
        let fmeta = Arc::new(tiled_meta(
            &format!("{name}.x"),
            batch.features.shape().clone(),
            world,
            0,
            0,
            1,
        )?);
        let lmeta = Arc::new(tiled_meta(
            &format!("{name}.y"),
            batch.labels.shape().clone(),
            world,
            0,
            0,
            1,
        )?);
        Ok(DistBatch {
            features: DistArray::from_global(fmeta, &batch.features, owner)?,
            labels: DistArray::from_global(lmeta, &batch.labels, owner)?,
        })
    }

    pub fn local_batch(&self) -> Batch {
        Batch { features: self.features.local_core(), labels: self.labels.local_core() }
    }

    pub fn global_samples(&self) -> usize {
        self.features.meta().global_shape.dim(0)
    }

    pub fn local_samples(&self) -> usize {
        self.features.span().core_len(0)
    }
}

/// One synchronous data-parallel step: local forward and backward over the
/// owned tile, gradients weighted by local/global sample counts and
/// all-reduced (a global-batch mean), then an identical solver step on every
/// locality. Returns the updated replica and the global mean loss.
///
/// Replica agreement is verified by checksum after the step; divergence is a
/// hard error. `tag_base` must be an internal-namespace tag range unique to
/// this step.
pub fn data_parallel_step(
    model: &ModelSpec,
    batch: &DistBatch,
    cfg: &SolverConfig,
    comm: &Arc<CommHandle>,
    pool: &ExecPool,
    tag_base: u64,
) -> Result<(ModelSpec, f64)> {
    debug_assert!(tag_base & TAG_INTERNAL_BIT != 0, "step tags live in the internal namespace");
    let local = batch.local_batch();
    let n_local = local.len();
    let n_global = batch.global_samples();
    if n_local == 0 || n_global == 0 {
        return Err(RuntimeError::Type("empty batch tile".into()));
    }
    let weight = n_local as f64 / n_global as f64;

    let (activations, local_loss) = forward_pass(model, &local, pool)?;
    let grads = backward_pass(model, &activations, &local.labels, pool)?;
    let weighted = grads.scale(weight);

    // Reduce every gradient tensor and the weighted loss; tensors below the
    // fusion threshold coalesce on the wire. All cells are issued before any
    // await, so the collectives overlap.
    let tensors = weighted.tensors();
    let cells: Vec<FutureCell<DenseTensor>> = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| comm.all_reduce(t, ReduceOp::Sum, tag_base + i as u64))
        .collect();
    let loss_tensor = DenseTensor::from_vec(vec![local_loss * weight]);
    let loss_cell = comm.all_reduce(&loss_tensor, ReduceOp::Sum, tag_base + tensors.len() as u64);

    let mut reduced = Vec::with_capacity(cells.len());
    for cell in &cells {
        reduced.push(comm.scheduler().help_until(cell)?);
    }
    let global_loss = comm.scheduler().help_until(&loss_cell)?.as_slice()[0];

    let mean_grads = ModelGrads::from_tensors(model, reduced);
    let stepped = sgd_step(model, &mean_grads, cfg)?;

    // Synchronous-update invariant: every replica must hold bitwise-identical
    // parameters after the step.
    let digest = stepped.param_checksum().to_le_bytes().to_vec();
    let gathered = comm.all_gather_bytes(digest.clone(), tag_base + tensors.len() as u64 + 1);
    let digests = comm.scheduler().help_until(&gathered)?;
    if digests.iter().any(|d| d != &digest) {
        return Err(RuntimeError::ReplicaDivergence);
    }
    Ok((stepped, global_loss))
}

/// The loss a single locality would compute over the whole batch, assembled
/// from per-tile losses: all-reduce of `local_loss * n_local / n_global`.
pub fn distributed_loss(
    local_loss: f64,
    batch: &DistBatch,
    comm: &Arc<CommHandle>,
    tag: u64,
) -> FutureCell<DenseTensor> {
    let weight = batch.local_samples() as f64 / batch.global_samples() as f64;
    comm.all_reduce(&DenseTensor::from_vec(vec![local_loss * weight]), ReduceOp::Sum, tag)
}

/// Convolution over an input tiled on the length axis with overlapped
/// tiling. Requires overlap >= K-1 and ghosts refreshed for the current
/// generation; each output element reproduces the global convolution
/// arithmetic exactly, so the gathered result is bitwise identical to the
/// dense convolution of the gathered input.
pub fn spatial_conv_forward(
    x: &DistArray,
    w: &DenseTensor,
    b: &DenseTensor,
    pool: &ExecPool,
) -> Result<DistArray> {
    let meta = x.meta();
    if meta.tiled_axis != 2 || meta.global_shape.rank() != 3 {
        return Err(RuntimeError::Type("spatial convolution expects (N, C, L) tiled on L".into()));
    }
    let k = w.shape().dim(2);
    let overlap = meta.overlap();
    if overlap + 1 < k {
        return Err(RuntimeError::InsufficientOverlap { required: k - 1, found: overlap });
    }
    let (n, c_in, l_global) = (
        meta.global_shape.dim(0),
        meta.global_shape.dim(1),
        meta.global_shape.dim(2),
    );
    let (c_out, wc_in, _) = (w.shape().dim(0), w.shape().dim(1), w.shape().dim(2));
    if wc_in != c_in || b.shape().dims() != [c_out] || l_global < k {
        return Err(RuntimeError::ShapeMismatch {
            expected: format!("kernel (C,{c_in},K<={l_global})"),
            found: w.shape().to_string(),
        });
    }
    let l_out_global = l_global - k + 1;
    let out_meta = Arc::new(spatial_output_meta(meta, l_out_global, c_out)?);

    // My output core in global coordinates, and its offset into the local
    // (halo-extended) input buffer.
    let span = x.span();
    let halo = span.with_halo(&meta.global_shape);
    let in_begin = halo[2].start;
    let out_range = out_meta.tile_map[x.owner()].core_range(2);
    let out_len = out_range.len();
    let local_l = x.local().shape().dim(2);

    let (xd, wd, bd) = (x.local().clone(), w.clone(), b.clone());
    let offset = out_range.start - in_begin;
    let data = pool.run(n * c_out * out_len, move |range| {
        let xv = xd.as_slice();
        let wv = wd.as_slice();
        let bv = bd.as_slice();
        range
            .map(|flat| {
                let j = flat % out_len;
                let o = (flat / out_len) % c_out;
                let nn = flat / (out_len * c_out);
                let t = offset + j;
                let mut acc = bv[o];
                for c in 0..c_in {
                    let x_base = (nn * c_in + c) * local_l + t;
                    let w_base = (o * c_in + c) * k;
                    for kk in 0..k {
                        acc += xv[x_base + kk] * wv[w_base + kk];
                    }
                }
                acc
            })
            .collect()
    })?;
    let local_shape = Shape::new(vec![n, c_out, out_len]);
    Ok(DistArray::from_parts(out_meta, DenseTensor::new(local_shape, data), x.owner()))
}

/// Halo refresh followed by the spatially parallel convolution.
pub fn spatial_conv_with_halo(
    x: &DistArray,
    w: &DenseTensor,
    b: &DenseTensor,
    comm: &Arc<CommHandle>,
    pool: &ExecPool,
) -> Result<DistArray> {
    let k = w.shape().dim(2);
    let overlap = x.meta().overlap();
    if overlap + 1 < k {
        return Err(RuntimeError::InsufficientOverlap { required: k - 1, found: overlap });
    }
    let refreshed = comm.scheduler().help_until(&x.halo_exchange(comm))?;
    spatial_conv_forward(&refreshed, w, b, pool)
}

/// Output tiling of the spatial convolution: input cores clamped to the
/// shorter output axis (tiles entirely in the lost tail become empty).
fn spatial_output_meta(input: &ArrayMeta, l_out: usize, c_out: usize) -> Result<ArrayMeta> {
    let mut global = input.global_shape.dims().to_vec();
    global[1] = c_out;
    global[2] = l_out;
    let tile_map = input
        .tile_map
        .iter()
        .map(|span| {
            let core = span.core_range(2);
            let clamped = core.start.min(l_out)..core.end.min(l_out);
            let mut dims: Vec<std::ops::Range<usize>> =
                global.iter().map(|&d| 0..d).collect();
            dims[2] = clamped;
            TileSpan::new(dims, vec![0, 0, 0])
        })
        .collect();
    Ok(ArrayMeta {
        array_name: format!("{}.conv", input.array_name),
        generation: 1,
        num_localities: input.num_localities,
        tile_map,
        tiled_axis: 2,
        global_shape: Shape::new(global),
    })
}
