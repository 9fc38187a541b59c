//! Tagged active messages exchanged between localities.

use crate::error::{Result, RuntimeError};

/// One participant in the SPMD job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LocalityId {
    pub rank: usize,
    pub world: usize,
}

impl LocalityId {
    pub fn new(rank: usize, world: usize) -> LocalityId {
        assert!(world >= 1 && rank < world, "rank {rank} outside world {world}");
        assert!(world <= u16::MAX as usize, "world size exceeds wire limit");
        LocalityId { rank, world }
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }
}

pub const MAX_PAYLOAD: usize = u32::MAX as usize;

/// Bit 63 of a tag marks the reply direction of a collective exchange; user
/// tags must leave it clear.
pub const TAG_REPLY_BIT: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: u16,
    pub dst: u16,
    /// Collective / operation id.
    pub tag: u64,
    /// Per-(src, dst) sequence number, assigned at post time.
    pub seq: u64,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn check_payload(len: usize) -> Result<()> {
        if len > MAX_PAYLOAD {
            return Err(RuntimeError::PayloadTooLarge(len));
        }
        Ok(())
    }

    /// Encoded size within a frame: tag, seq, payload_len, payload.
    pub fn wire_len(&self) -> usize {
        8 + 8 + 4 + self.payload.len()
    }
}
