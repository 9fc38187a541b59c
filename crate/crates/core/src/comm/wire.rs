//! Wire frame codec (all integers little-endian):
//!
//!   magic "TLAW" | version u8=1 | frame_type u8 {0=single,1=fused,2=handshake}
//!   | src u16 | dst u16 | count u32
//!   | repeated per envelope: tag u64, seq u64, payload_len u32, payload
//!
//! A handshake frame carries one envelope whose payload is rank u16,
//! world_size u16.

use std::io::Read;

use crate::comm::envelope::Envelope;
use crate::error::{Result, RuntimeError};

pub const MAGIC: [u8; 4] = *b"TLAW";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Single,
    Fused,
    Handshake,
}

impl FrameKind {
    fn to_byte(self) -> u8 {
        match self {
            FrameKind::Single => 0,
            FrameKind::Fused => 1,
            FrameKind::Handshake => 2,
        }
    }

    fn from_byte(b: u8) -> Result<FrameKind> {
        match b {
            0 => Ok(FrameKind::Single),
            1 => Ok(FrameKind::Fused),
            2 => Ok(FrameKind::Handshake),
            other => Err(RuntimeError::TransportDown(format!("unknown frame type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub src: u16,
    pub dst: u16,
    pub envelopes: Vec<Envelope>,
}

impl Frame {
    pub fn single(env: Envelope) -> Frame {
        Frame { kind: FrameKind::Single, src: env.src, dst: env.dst, envelopes: vec![env] }
    }

    pub fn fused(envelopes: Vec<Envelope>) -> Frame {
        assert!(!envelopes.is_empty());
        let (src, dst) = (envelopes[0].src, envelopes[0].dst);
        debug_assert!(envelopes.iter().all(|e| e.src == src && e.dst == dst));
        let kind = if envelopes.len() == 1 { FrameKind::Single } else { FrameKind::Fused };
        Frame { kind, src, dst, envelopes }
    }

    pub fn handshake(rank: u16, world: u16) -> Frame {
        let mut payload = Vec::with_capacity(4);
        payload.extend_from_slice(&rank.to_le_bytes());
        payload.extend_from_slice(&world.to_le_bytes());
        Frame {
            kind: FrameKind::Handshake,
            src: rank,
            dst: u16::MAX,
            envelopes: vec![Envelope { src: rank, dst: u16::MAX, tag: 0, seq: 0, payload }],
        }
    }

    pub fn parse_handshake(&self) -> Option<(u16, u16)> {
        if self.kind != FrameKind::Handshake || self.envelopes.len() != 1 {
            return None;
        }
        let p = &self.envelopes[0].payload;
        if p.len() != 4 {
            return None;
        }
        Some((
            u16::from_le_bytes([p[0], p[1]]),
            u16::from_le_bytes([p[2], p[3]]),
        ))
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let body: usize = frame.envelopes.iter().map(Envelope::wire_len).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.kind.to_byte());
    out.extend_from_slice(&frame.src.to_le_bytes());
    out.extend_from_slice(&frame.dst.to_le_bytes());
    out.extend_from_slice(&(frame.envelopes.len() as u32).to_le_bytes());
    for env in &frame.envelopes {
        out.extend_from_slice(&env.tag.to_le_bytes());
        out.extend_from_slice(&env.seq.to_le_bytes());
        out.extend_from_slice(&(env.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&env.payload);
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    let bad = |msg: &str| RuntimeError::TransportDown(format!("malformed frame: {msg}"));
    if bytes.len() < HEADER_LEN {
        return Err(bad("short header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad("bad version"));
    }
    let kind = FrameKind::from_byte(bytes[5])?;
    let src = u16::from_le_bytes([bytes[6], bytes[7]]);
    let dst = u16::from_le_bytes([bytes[8], bytes[9]]);
    let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let mut envelopes = Vec::with_capacity(count);
    let mut off = HEADER_LEN;
    for _ in 0..count {
        if bytes.len() < off + 20 {
            return Err(bad("short envelope header"));
        }
        let tag = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let seq = u64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[off + 16..off + 20].try_into().unwrap()) as usize;
        off += 20;
        if bytes.len() < off + len {
            return Err(bad("short payload"));
        }
        envelopes.push(Envelope { src, dst, tag, seq, payload: bytes[off..off + len].to_vec() });
        off += len;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Frame { kind, src, dst, envelopes })
}

/// Read one length-delimited frame off a byte stream. Returns the raw frame
/// bytes; `Ok(None)` on clean EOF at a frame boundary.
pub fn read_frame_bytes(reader: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; HEADER_LEN];
    match reader.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let count = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let mut bytes = header.to_vec();
    for _ in 0..count {
        let mut env_header = [0u8; 20];
        reader.read_exact(&mut env_header)?;
        let len = u32::from_le_bytes(env_header[16..20].try_into().unwrap()) as usize;
        bytes.extend_from_slice(&env_header);
        let start = bytes.len();
        bytes.resize(start + len, 0);
        reader.read_exact(&mut bytes[start..])?;
    }
    Ok(Some(bytes))
}
