//! Asynchronous collectives over the active-message endpoint.
//!
//! Reductions combine contributions in rank order 0..P-1 with a fixed
//! left-to-right fold, so every collective is bitwise deterministic for a
//! given world size — independent of transport, fusion settings, and worker
//! counts. Small worlds use a gather-to-root + broadcast exchange; larger
//! worlds use a chunked exchange that preserves the same rank-ordered fold
//! per chunk.

use std::sync::Arc;

use crate::comm::envelope::TAG_REPLY_BIT;
use crate::comm::CommHandle;
use crate::error::{Result, RuntimeError};
use crate::exec::future::when_all;
use crate::exec::FutureCell;
use crate::value::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
}

impl ReduceOp {
    fn fold_into(self, acc: &mut [f64], contribution: &[f64]) {
        match self {
            ReduceOp::Sum => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            ReduceOp::Max => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    if *c > *a {
                        *a = *c;
                    }
                }
            }
        }
    }
}

/// Left-to-right fold over rank-ordered contributions; the sequential oracle
/// for every reduction path.
pub fn reduce_rank_order(contributions: &[DenseTensor], op: ReduceOp) -> Result<DenseTensor> {
    let first = contributions.first().ok_or_else(|| {
        RuntimeError::Type("reduction over zero contributions".into())
    })?;
    let mut acc = first.as_slice().to_vec();
    for c in &contributions[1..] {
        if c.shape() != first.shape() {
            return Err(RuntimeError::ShapeMismatch {
                expected: first.shape().to_string(),
                found: c.shape().to_string(),
            });
        }
        op.fold_into(&mut acc, c.as_slice());
    }
    Ok(DenseTensor::new(first.shape().clone(), acc))
}

fn ok_payload(t: &DenseTensor) -> Vec<u8> {
    let mut p = Vec::with_capacity(1 + t.len() * 8 + 16);
    p.push(0);
    p.extend_from_slice(&t.canonical_bytes());
    p
}

fn err_payload(e: &RuntimeError) -> Vec<u8> {
    let msg = e.to_string();
    let mut p = Vec::with_capacity(1 + msg.len());
    p.push(1);
    p.extend_from_slice(msg.as_bytes());
    p
}

fn parse_reply(payload: &[u8]) -> Result<DenseTensor> {
    match payload.first() {
        Some(0) => DenseTensor::from_canonical(&payload[1..]),
        Some(1) => Err(RuntimeError::TransportDown(
            String::from_utf8_lossy(&payload[1..]).into_owned(),
        )),
        _ => Err(RuntimeError::TransportDown("empty collective reply".into())),
    }
}

/// Flat near-even partition with the remainder on the lowest ranks.
pub fn partition_even(len: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let base = len / parts;
    let rem = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut begin = 0;
    for i in 0..parts {
        let size = base + usize::from(i < rem);
        out.push(begin..begin + size);
        begin += size;
    }
    out
}

/// Hook completion bookkeeping onto a collective's final cell.
fn finish<T: Clone + Send + 'static>(
    comm: &Arc<CommHandle>,
    tag: u64,
    cell: FutureCell<T>,
) -> FutureCell<T> {
    let comm = Arc::clone(comm);
    let out = cell.clone();
    cell.on_ready(move |outcome| {
        comm.release_tag(tag);
        if outcome.is_ok() {
            comm.counters().add_collective();
        }
    });
    out
}

fn check_tag(comm: &Arc<CommHandle>, tag: u64) -> Result<()> {
    // Bit 63 distinguishes the reply direction of an exchange; bit 62 (the
    // runtime-internal namespace) is a legitimate collective tag.
    if tag & TAG_REPLY_BIT != 0 {
        return Err(RuntimeError::Type(format!("tag {tag:#x} uses the reserved reply bit")));
    }
    comm.claim_tag(tag)
}

impl CommHandle {
    /// Elementwise reduction over all localities' contributions, rank order.
    /// Returns immediately; the caller may run other work before awaiting.
    pub fn all_reduce(
        self: &Arc<Self>,
        local: &DenseTensor,
        op: ReduceOp,
        tag: u64,
    ) -> FutureCell<DenseTensor> {
        if let Err(e) = check_tag(self, tag) {
            return FutureCell::failed(e);
        }
        if self.world() == 1 {
            return finish(self, tag, FutureCell::ready(local.clone()));
        }
        let cell = if self.world() <= self.naive_cutoff() {
            self.all_reduce_gathered(local, op, tag)
        } else {
            self.all_reduce_chunked(local, op, tag)
        };
        finish(self, tag, cell)
    }

    fn all_reduce_gathered(
        self: &Arc<Self>,
        local: &DenseTensor,
        op: ReduceOp,
        tag: u64,
    ) -> FutureCell<DenseTensor> {
        let world = self.world();
        if self.rank() == 0 {
            let recvs: Vec<FutureCell<Vec<u8>>> =
                (1..world).map(|src| self.recv(src, tag)).collect();
            let local = local.clone();
            let comm = Arc::clone(self);
            let joined = when_all(&recvs);
            match self.scheduler().spawn_after(vec![joined], move |mut vals| {
                let payloads = vals.pop().expect("one dep");
                let mut contributions = Vec::with_capacity(world);
                contributions.push(local);
                for p in &payloads {
                    contributions.push(DenseTensor::from_canonical(p)?);
                }
                let result = reduce_rank_order(&contributions, op);
                let reply = match &result {
                    Ok(t) => ok_payload(t),
                    Err(e) => err_payload(e),
                };
                for dst in 1..world {
                    comm.post(dst, tag | TAG_REPLY_BIT, reply.clone())?;
                }
                result
            }) {
                Ok(c) => c,
                Err(e) => FutureCell::failed(e),
            }
        } else {
            if let Err(e) = self.post(0, tag, local.canonical_bytes()) {
                return FutureCell::failed(e);
            }
            let reply = self.recv(0, tag | TAG_REPLY_BIT);
            match self.scheduler().spawn_after(vec![reply], move |mut vals| {
                parse_reply(&vals.pop().expect("one dep"))
            }) {
                Ok(c) => c,
                Err(e) => FutureCell::failed(e),
            }
        }
    }

    /// Reduce-scatter in explicit rank order, then exchange reduced chunks.
    /// Bitwise identical to the gathered path for the same inputs.
    fn all_reduce_chunked(
        self: &Arc<Self>,
        local: &DenseTensor,
        op: ReduceOp,
        tag: u64,
    ) -> FutureCell<DenseTensor> {
        let world = self.world();
        let me = self.rank();
        let shape = local.shape().clone();
        let chunks = partition_even(local.len(), world);

        // Phase 1: send peer j its chunk of our contribution.
        for (j, range) in chunks.iter().enumerate() {
            if j == me {
                continue;
            }
            let mut payload = shape_header(&shape);
            payload.extend_from_slice(
                &DenseTensor::from_vec(local.as_slice()[range.clone()].to_vec()).canonical_bytes(),
            );
            if let Err(e) = self.post(j, tag, payload) {
                return FutureCell::failed(e);
            }
        }
        let phase1: Vec<FutureCell<Vec<u8>>> =
            (0..world).filter(|&j| j != me).map(|j| self.recv(j, tag)).collect();
        // Phase 2 recvs registered up front; FIFO per (src, tag) pairs them
        // with the second message from each peer.
        let phase2: Vec<FutureCell<Vec<u8>>> =
            (0..world).filter(|&j| j != me).map(|j| self.recv(j, tag)).collect();

        // Reduce my chunk over rank-ordered contributions, then send the
        // reply-framed result to every peer (their phase-2 message).
        let comm = Arc::clone(self);
        let my_piece = local.as_slice()[chunks[me].clone()].to_vec();
        let expected_shape = shape.clone();
        let joined1 = when_all(&phase1);
        let my_reduced: FutureCell<Vec<u8>> =
            match self.scheduler().spawn_after(vec![joined1], move |mut vals| {
                let payloads = vals.pop().expect("one dep");
                let fold = || -> Result<DenseTensor> {
                    let mut acc: Option<Vec<f64>> = None;
                    let mut it = payloads.iter();
                    for j in 0..world {
                        let piece: Vec<f64> = if j == me {
                            my_piece.clone()
                        } else {
                            let (peer_shape, elems) = parse_chunk(it.next().expect("phase1"))?;
                            if peer_shape != expected_shape {
                                return Err(RuntimeError::ShapeMismatch {
                                    expected: expected_shape.to_string(),
                                    found: peer_shape.to_string(),
                                });
                            }
                            elems
                        };
                        match &mut acc {
                            None => acc = Some(piece),
                            Some(a) => op.fold_into(a, &piece),
                        }
                    }
                    Ok(DenseTensor::from_vec(acc.unwrap_or_default()))
                };
                let result = fold();
                let reply = match &result {
                    Ok(t) => ok_payload(t),
                    Err(e) => err_payload(e),
                };
                for dst in (0..world).filter(|&d| d != me) {
                    comm.post(dst, tag, reply.clone())?;
                }
                result.map(|_| reply)
            }) {
                Ok(c) => c,
                Err(e) => return FutureCell::failed(e),
            };

        // Assemble: peers' reduced chunks plus our own, in rank order.
        let mut deps = phase2;
        deps.push(my_reduced);
        match self.scheduler().spawn_after(deps, move |mut vals| {
            let mine = parse_reply(&vals.pop().expect("own chunk"))?;
            let mut out = vec![0.0; shape.len()];
            let mut it = vals.iter();
            for (j, range) in chunks.iter().enumerate() {
                let piece = if j == me {
                    mine.clone()
                } else {
                    parse_reply(it.next().expect("phase2 payload"))?
                };
                if piece.len() != range.len() {
                    return Err(RuntimeError::ShapeMismatch {
                        expected: format!("{}", range.len()),
                        found: format!("{}", piece.len()),
                    });
                }
                out[range.clone()].copy_from_slice(piece.as_slice());
            }
            Ok(DenseTensor::new(shape.clone(), out))
        }) {
            Ok(c) => c,
            Err(e) => FutureCell::failed(e),
        }
    }

    /// Rank-ordered list of every locality's contribution. Contributions may
    /// differ in shape (tile sizes differ by one across ranks).
    pub fn all_gather(self: &Arc<Self>, local: &DenseTensor, tag: u64) -> FutureCell<Vec<DenseTensor>> {
        let bytes = local.canonical_bytes();
        let gathered = self.all_gather_bytes_impl(bytes, tag, true);
        match self.scheduler().spawn_after(vec![gathered], |mut vals| {
            vals.pop().expect("one dep").iter().map(|p| DenseTensor::from_canonical(p)).collect()
        }) {
            Ok(c) => c,
            Err(e) => FutureCell::failed(e),
        }
    }

    /// Byte-level all-gather (used for checksums and counter merging).
    pub fn all_gather_bytes(self: &Arc<Self>, local: Vec<u8>, tag: u64) -> FutureCell<Vec<Vec<u8>>> {
        self.all_gather_bytes_impl(local, tag, true)
    }

    fn all_gather_bytes_impl(
        self: &Arc<Self>,
        local: Vec<u8>,
        tag: u64,
        claim: bool,
    ) -> FutureCell<Vec<Vec<u8>>> {
        if claim {
            if let Err(e) = check_tag(self, tag) {
                return FutureCell::failed(e);
            }
        }
        let world = self.world();
        let me = self.rank();
        if world == 1 {
            return finish(self, tag, FutureCell::ready(vec![local]));
        }
        for dst in (0..world).filter(|&d| d != me) {
            if let Err(e) = self.post(dst, tag, local.clone()) {
                return finish(self, tag, FutureCell::failed(e));
            }
        }
        let recvs: Vec<FutureCell<Vec<u8>>> =
            (0..world).filter(|&j| j != me).map(|j| self.recv(j, tag)).collect();
        let joined = when_all(&recvs);
        let cell = match self.scheduler().spawn_after(vec![joined], move |mut vals| {
            let payloads = vals.pop().expect("one dep");
            let mut out = Vec::with_capacity(world);
            let mut it = payloads.into_iter();
            for j in 0..world {
                if j == me {
                    out.push(local.clone());
                } else {
                    out.push(it.next().expect("gather payload"));
                }
            }
            Ok(out)
        }) {
            Ok(c) => c,
            Err(e) => FutureCell::failed(e),
        };
        finish(self, tag, cell)
    }

    /// Every locality resolves with the root's bytes. Exactly the root
    /// supplies a value; violations are detected locally.
    pub fn broadcast(
        self: &Arc<Self>,
        root: usize,
        value: Option<&DenseTensor>,
        tag: u64,
    ) -> FutureCell<DenseTensor> {
        let me = self.rank();
        if me == root && value.is_none() {
            return FutureCell::failed(RuntimeError::NoRoot(me));
        }
        if me != root && value.is_some() {
            return FutureCell::failed(RuntimeError::MultipleRoots(me));
        }
        if root >= self.world() {
            return FutureCell::failed(RuntimeError::UnknownLocality {
                rank: root,
                world: self.world(),
            });
        }
        if let Err(e) = check_tag(self, tag) {
            return FutureCell::failed(e);
        }
        if self.world() == 1 {
            return finish(self, tag, FutureCell::ready(value.unwrap().clone()));
        }
        if me == root {
            let value = value.unwrap();
            let bytes = value.canonical_bytes();
            for dst in (0..self.world()).filter(|&d| d != me) {
                if let Err(e) = self.post(dst, tag, bytes.clone()) {
                    return finish(self, tag, FutureCell::failed(e));
                }
            }
            finish(self, tag, FutureCell::ready(value.clone()))
        } else {
            let reply = self.recv(root, tag);
            let cell = match self
                .scheduler()
                .spawn_after(vec![reply], move |mut vals| {
                    DenseTensor::from_canonical(&vals.pop().expect("one dep"))
                }) {
                Ok(c) => c,
                Err(e) => FutureCell::failed(e),
            };
            finish(self, tag, cell)
        }
    }
}

fn shape_header(shape: &crate::value::Shape) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + shape.rank() * 8);
    out.extend_from_slice(&(shape.rank() as u32).to_le_bytes());
    for &d in shape.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

fn parse_chunk(payload: &[u8]) -> Result<(crate::value::Shape, Vec<f64>)> {
    let bad = || RuntimeError::TransportDown("malformed chunk payload".into());
    if payload.len() < 4 {
        return Err(bad());
    }
    let rank = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    let mut off = 4;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        if payload.len() < off + 8 {
            return Err(bad());
        }
        dims.push(u64::from_le_bytes(payload[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let shape = crate::value::Shape::checked(dims)?;
    let (_, elems) = crate::value::decode_canonical(&payload[off..])?;
    Ok((shape, elems))
}
