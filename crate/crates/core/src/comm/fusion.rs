//! Message coalescing: small envelopes bound for the same destination are
//! buffered and emitted as one fused frame, either when the pending bytes
//! reach `threshold_bytes` or when `flush_interval` has elapsed since the
//! first pending envelope. Envelopes at least as large as the threshold
//! bypass buffering (after flushing what is pending, to keep FIFO order).

use std::time::{Duration, Instant};

use crate::comm::envelope::Envelope;
use crate::comm::wire::Frame;
use crate::exec::FutureCell;

#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// 0 disables coalescing entirely.
    pub threshold_bytes: usize,
    pub flush_interval: Duration,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { threshold_bytes: 65536, flush_interval: Duration::from_millis(2) }
    }
}

impl FusionConfig {
    pub fn disabled() -> FusionConfig {
        FusionConfig { threshold_bytes: 0, ..FusionConfig::default() }
    }
}

type Ack = FutureCell<()>;

/// Per-destination coalescing buffer. Callers hold the endpoint's per-dst
/// lock while pushing, so the FIFO order of pending envelopes is the post
/// order.
pub struct FusionBuffer {
    cfg: FusionConfig,
    pending: Vec<Envelope>,
    pending_bytes: usize,
    first_at: Option<Instant>,
    acks: Vec<Ack>,
}

impl FusionBuffer {
    pub fn new(cfg: FusionConfig) -> FusionBuffer {
        FusionBuffer { cfg, pending: Vec::new(), pending_bytes: 0, first_at: None, acks: Vec::new() }
    }

    /// Queue an envelope; returns the frames that must be emitted now, each
    /// with the acks to resolve once sent.
    pub fn push(&mut self, env: Envelope, ack: Ack) -> Vec<(Frame, Vec<Ack>)> {
        let mut out = Vec::new();
        if self.cfg.threshold_bytes == 0 {
            out.push((Frame::single(env), vec![ack]));
            return out;
        }
        if env.payload.len() >= self.cfg.threshold_bytes {
            // Large envelope: preserve FIFO by draining the buffer first.
            if let Some(flushed) = self.take_pending() {
                out.push(flushed);
            }
            out.push((Frame::single(env), vec![ack]));
            return out;
        }
        self.pending_bytes += env.wire_len();
        self.pending.push(env);
        self.acks.push(ack);
        if self.first_at.is_none() {
            self.first_at = Some(Instant::now());
        }
        if self.pending_bytes >= self.cfg.threshold_bytes {
            if let Some(flushed) = self.take_pending() {
                out.push(flushed);
            }
        }
        out
    }

    /// Emit all pending envelopes as one coalesced frame.
    pub fn flush(&mut self) -> Option<(Frame, Vec<Ack>)> {
        self.take_pending()
    }

    /// Deadline at which the interval flush must fire, if anything pends.
    pub fn deadline(&self) -> Option<Instant> {
        self.first_at.map(|t| t + self.cfg.flush_interval)
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    fn take_pending(&mut self) -> Option<(Frame, Vec<Ack>)> {
        if self.pending.is_empty() {
            return None;
        }
        let envs = std::mem::take(&mut self.pending);
        let acks = std::mem::take(&mut self.acks);
        self.pending_bytes = 0;
        self.first_at = None;
        Some((Frame::fused(envs), acks))
    }
}
