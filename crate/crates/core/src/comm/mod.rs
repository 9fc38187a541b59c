//! Inter-locality transport endpoint: asynchronous active messaging with
//! per-destination coalescing, a tag-matched mailbox, and the collectives
//! built on top.
//!
//! Each locality owns one `CommHandle`. A dedicated receive loop dispatches
//! incoming envelopes to waiting cells; continuations registered there only
//! enqueue scheduler tasks, so user code never blocks the receive loop.

pub mod collectives;
pub mod envelope;
pub mod fusion;
pub mod transport;
pub mod wire;

pub use collectives::ReduceOp;
pub use envelope::{Envelope, LocalityId, TAG_REPLY_BIT};
pub use fusion::{FusionBuffer, FusionConfig};
pub use transport::{bind_local_mesh, in_proc_fabric, socket_endpoint, Transport};

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::counters::Counters;
use crate::error::{Result, RuntimeError};
use crate::exec::{FutureCell, Scheduler};
use wire::{decode_frame, encode_frame, Frame, FrameKind};

/// Tags with bit 62 set are reserved for runtime-internal exchanges (halo,
/// gather, parameter sync); user collective tags must keep bits 62..64 clear.
pub const TAG_INTERNAL_BIT: u64 = 1 << 62;

/// Poison envelopes fail every pending and future receive on a locality;
/// posted to peers when a locality aborts so the job unwinds instead of
/// deadlocking in half-entered collectives.
pub const TAG_POISON: u64 = u64::MAX;

/// Tag of the pre-shutdown rendezvous gather.
pub const QUIESCE_TAG: u64 = TAG_INTERNAL_BIT | (5 << 56);

struct MailSlot {
    queue: VecDeque<Vec<u8>>,
    waiters: VecDeque<FutureCell<Vec<u8>>>,
}

#[derive(Default)]
struct Mailbox {
    slots: Mutex<HashMap<(usize, u64), MailSlot>>,
    /// Next expected per-source sequence number; validates end-to-end FIFO.
    expected_seq: Mutex<HashMap<usize, u64>>,
    poisoned: Mutex<Option<RuntimeError>>,
}

impl Mailbox {
    fn deliver(&self, env: Envelope) {
        {
            let mut expected = self.expected_seq.lock().unwrap();
            let slot = expected.entry(env.src as usize).or_insert(0);
            debug_assert_eq!(env.seq, *slot, "per-(src,dst) FIFO violated from rank {}", env.src);
            *slot = env.seq + 1;
        }
        if env.tag == TAG_POISON {
            self.fail_all(RuntimeError::TransportDown(
                String::from_utf8_lossy(&env.payload).into_owned(),
            ));
            return;
        }
        let waiter = {
            let mut slots = self.slots.lock().unwrap();
            let slot = slots
                .entry((env.src as usize, env.tag))
                .or_insert_with(|| MailSlot { queue: VecDeque::new(), waiters: VecDeque::new() });
            match slot.waiters.pop_front() {
                Some(w) => Some((w, env.payload)),
                None => {
                    slot.queue.push_back(env.payload);
                    None
                }
            }
        };
        if let Some((w, payload)) = waiter {
            w.resolve(Ok(payload));
        }
    }

    fn recv(&self, src: usize, tag: u64) -> FutureCell<Vec<u8>> {
        if let Some(err) = self.poisoned.lock().unwrap().clone() {
            return FutureCell::failed(err);
        }
        let mut slots = self.slots.lock().unwrap();
        let slot = slots
            .entry((src, tag))
            .or_insert_with(|| MailSlot { queue: VecDeque::new(), waiters: VecDeque::new() });
        match slot.queue.pop_front() {
            Some(payload) => FutureCell::ready(payload),
            None => {
                let cell = FutureCell::pending();
                slot.waiters.push_back(cell.clone());
                cell
            }
        }
    }

    /// Fail every pending waiter and make the failure sticky for later
    /// receives.
    fn fail_all(&self, err: RuntimeError) {
        let waiters: Vec<FutureCell<Vec<u8>>> = {
            let mut poisoned = self.poisoned.lock().unwrap();
            let mut slots = self.slots.lock().unwrap();
            if poisoned.is_none() {
                *poisoned = Some(err.clone());
            }
            slots.values_mut().flat_map(|s| s.waiters.drain(..)).collect()
        };
        for w in waiters {
            w.resolve(Err(err.clone()));
        }
    }
}

struct Lane {
    fusion: FusionBuffer,
    next_seq: u64,
}

pub struct CommHandle {
    id: LocalityId,
    transport: Arc<dyn Transport>,
    lanes: Vec<Mutex<Lane>>,
    mailbox: Mailbox,
    counters: Arc<Counters>,
    scheduler: Arc<Scheduler>,
    active_tags: Mutex<HashSet<u64>>,
    /// World sizes up to this use the gather+broadcast collective; larger
    /// worlds use the chunked exchange. Test-tunable.
    naive_cutoff: AtomicUsize,
    down: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl CommHandle {
    pub fn new(
        id: LocalityId,
        transport: Arc<dyn Transport>,
        ingress: Receiver<Vec<u8>>,
        fusion_cfg: FusionConfig,
        scheduler: Arc<Scheduler>,
        counters: Arc<Counters>,
    ) -> Arc<CommHandle> {
        let lanes = (0..id.world)
            .map(|_| Mutex::new(Lane { fusion: FusionBuffer::new(fusion_cfg.clone()), next_seq: 0 }))
            .collect();
        let handle = Arc::new(CommHandle {
            id,
            transport,
            lanes,
            mailbox: Mailbox::default(),
            counters,
            scheduler,
            active_tags: Mutex::new(HashSet::new()),
            naive_cutoff: AtomicUsize::new(8),
            down: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
        });

        let recv_handle = {
            let h = Arc::clone(&handle);
            std::thread::Builder::new()
                .name(format!("tla-recv-{}", id.rank))
                .spawn(move || h.receive_loop(ingress))
                .expect("spawn receive loop")
        };
        let flush_handle = {
            let h = Arc::clone(&handle);
            std::thread::Builder::new()
                .name(format!("tla-flush-{}", id.rank))
                .spawn(move || h.flush_loop(fusion_cfg.flush_interval))
                .expect("spawn flusher")
        };
        handle.threads.lock().unwrap().extend([recv_handle, flush_handle]);
        handle
    }

    pub fn locality(&self) -> LocalityId {
        self.id
    }

    pub fn rank(&self) -> usize {
        self.id.rank
    }

    pub fn world(&self) -> usize {
        self.id.world
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    /// Collective algorithm switch point (worlds larger than this use the
    /// chunked path).
    pub fn set_naive_cutoff(&self, cutoff: usize) {
        self.naive_cutoff.store(cutoff.max(1), Ordering::Relaxed);
    }

    pub(crate) fn naive_cutoff(&self) -> usize {
        self.naive_cutoff.load(Ordering::Relaxed)
    }

    fn receive_loop(&self, ingress: Receiver<Vec<u8>>) {
        while let Ok(bytes) = ingress.recv() {
            if bytes.is_empty() {
                break; // shutdown sentinel
            }
            match decode_frame(&bytes) {
                Ok(frame) => {
                    if frame.kind == FrameKind::Handshake {
                        continue;
                    }
                    for env in frame.envelopes {
                        self.mailbox.deliver(env);
                    }
                }
                Err(e) => {
                    self.mailbox.fail_all(e);
                    return;
                }
            }
        }
        self.mailbox.fail_all(RuntimeError::TransportDown("ingress closed".into()));
    }

    fn flush_loop(&self, interval: Duration) {
        let tick = (interval / 4).clamp(Duration::from_micros(100), Duration::from_millis(1));
        while !self.down.load(Ordering::Acquire) {
            std::thread::sleep(tick);
            let now = std::time::Instant::now();
            for dst in 0..self.id.world {
                if dst == self.id.rank {
                    continue;
                }
                let mut lane = self.lanes[dst].lock().unwrap();
                if lane.fusion.deadline().map(|d| d <= now).unwrap_or(false) {
                    if let Some((frame, acks)) = lane.fusion.flush() {
                        self.emit(dst, frame, acks);
                    }
                }
            }
        }
    }

    /// Encode and send one frame, resolving its acks. Callers hold the lane
    /// lock, which keeps per-destination frame order equal to post order.
    fn emit(&self, dst: usize, frame: Frame, acks: Vec<FutureCell<()>>) {
        let bytes = encode_frame(&frame);
        self.counters.add_frame(bytes.len());
        match self.transport.send_bytes(dst, bytes) {
            Ok(()) => {
                for ack in acks {
                    ack.resolve(Ok(()));
                }
            }
            Err(e) => {
                for ack in acks {
                    ack.resolve(Err(e.clone()));
                }
            }
        }
    }

    /// Nonblocking post. The ack resolves when the envelope has been handed
    /// to the transport (immediately for self posts, which skip the wire).
    pub fn post(&self, dst: usize, tag: u64, payload: Vec<u8>) -> Result<FutureCell<()>> {
        if self.down.load(Ordering::Acquire) {
            return Err(RuntimeError::TransportDown("endpoint shut down".into()));
        }
        if dst >= self.id.world {
            return Err(RuntimeError::UnknownLocality { rank: dst, world: self.id.world });
        }
        Envelope::check_payload(payload.len())?;
        self.counters.add_envelope();
        let ack: FutureCell<()> = FutureCell::pending();
        let mut lane = self.lanes[dst].lock().unwrap();
        let seq = lane.next_seq;
        lane.next_seq += 1;
        let env = Envelope { src: self.id.rank as u16, dst: dst as u16, tag, seq, payload };
        if dst == self.id.rank {
            // Loopback: deliver in post order under the lane lock.
            self.mailbox.deliver(env);
            drop(lane);
            ack.resolve(Ok(()));
            return Ok(ack);
        }
        for (frame, acks) in lane.fusion.push(env, ack.clone()) {
            self.emit(dst, frame, acks);
        }
        Ok(ack)
    }

    /// Next payload from `src` matching `tag` (FIFO per source and tag).
    pub fn recv(&self, src: usize, tag: u64) -> FutureCell<Vec<u8>> {
        self.mailbox.recv(src, tag)
    }

    /// Force out everything pending for one destination.
    pub fn flush(&self, dst: usize) {
        if dst == self.id.rank || dst >= self.id.world {
            return;
        }
        let mut lane = self.lanes[dst].lock().unwrap();
        if let Some((frame, acks)) = lane.fusion.flush() {
            self.emit(dst, frame, acks);
        }
    }

    pub fn flush_all(&self) {
        for dst in 0..self.id.world {
            self.flush(dst);
        }
    }

    pub(crate) fn claim_tag(&self, tag: u64) -> Result<()> {
        if !self.active_tags.lock().unwrap().insert(tag) {
            return Err(RuntimeError::TagCollision(tag));
        }
        Ok(())
    }

    pub(crate) fn release_tag(&self, tag: u64) {
        self.active_tags.lock().unwrap().remove(&tag);
    }

    /// Rendezvous before teardown: a byte-level gather proving every peer
    /// has finished sending program traffic, so closing this endpoint's
    /// streams cannot cut a slower locality off mid-collective. Best-effort;
    /// failures (a poisoned or dying job) resolve rather than hang.
    pub fn quiesce(self: &Arc<Self>) {
        if self.id.world <= 1 || self.down.load(Ordering::Acquire) {
            return;
        }
        let cell = self.all_gather_bytes(vec![1], QUIESCE_TAG);
        let _ = cell.wait();
    }

    /// Tell every peer this locality is aborting; their pending and future
    /// receives fail instead of waiting on contributions that will never
    /// arrive.
    pub fn poison_peers(&self, message: &str) {
        for dst in 0..self.id.world {
            if dst == self.id.rank {
                continue;
            }
            let _ = self.post(dst, TAG_POISON, message.as_bytes().to_vec());
            self.flush(dst);
        }
    }

    /// Flush buffers and stop the background threads. Pending mailbox waiters
    /// fail with a transport error.
    pub fn shutdown(&self) {
        if self.down.swap(true, Ordering::AcqRel) {
            return;
        }
        self.flush_all();
        self.transport.shutdown();
        self.mailbox.fail_all(RuntimeError::TransportDown("endpoint shut down".into()));
        let threads: Vec<_> = self.threads.lock().unwrap().drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for CommHandle {
    fn drop(&mut self) {
        self.down.store(true, Ordering::Release);
        self.transport.shutdown();
    }
}
