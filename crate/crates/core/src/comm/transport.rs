//! Byte transports behind one interface: in-process channels (localities as
//! threads) and a TCP mesh (localities as processes). Both carry encoded
//! wire frames, so program output is identical across transports.

use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::comm::wire::{decode_frame, encode_frame, read_frame_bytes, Frame};
use crate::error::{Result, RuntimeError};

pub trait Transport: Send + Sync {
    fn send_bytes(&self, dst: usize, bytes: Vec<u8>) -> Result<()>;
    fn shutdown(&self);
}

/// One locality's side of a fabric: its transport plus the ingress channel
/// its receive loop drains.
pub type Endpoint = (Arc<dyn Transport>, Receiver<Vec<u8>>);

// ---------------------------------------------------------------------------
// In-process transport
// ---------------------------------------------------------------------------

pub struct InProcTransport {
    rank: usize,
    senders: Vec<Sender<Vec<u8>>>,
    down: AtomicBool,
}

impl Transport for InProcTransport {
    fn send_bytes(&self, dst: usize, bytes: Vec<u8>) -> Result<()> {
        debug_assert_ne!(dst, self.rank, "self posts bypass the wire");
        if self.down.load(Ordering::Acquire) {
            return Err(RuntimeError::TransportDown("in-process fabric closed".into()));
        }
        self.senders
            .get(dst)
            .ok_or(RuntimeError::UnknownLocality { rank: dst, world: self.senders.len() })?
            .send(bytes)
            .map_err(|_| RuntimeError::TransportDown("peer receiver dropped".into()))
    }

    fn shutdown(&self) {
        if self.down.swap(true, Ordering::AcqRel) {
            return;
        }
        // Zero-byte sentinel unblocks our own receive loop; peers may still
        // hold senders, so channel closure cannot be relied on.
        let _ = self.senders[self.rank].send(Vec::new());
    }
}

/// Build the full in-process fabric: one (transport, ingress) pair per rank.
pub fn in_proc_fabric(world: usize) -> Vec<Endpoint> {
    let mut senders = Vec::with_capacity(world);
    let mut receivers = Vec::with_capacity(world);
    for _ in 0..world {
        let (tx, rx) = std::sync::mpsc::channel();
        senders.push(tx);
        receivers.push(rx);
    }
    receivers
        .into_iter()
        .enumerate()
        .map(|(rank, rx)| {
            let t: Arc<dyn Transport> = Arc::new(InProcTransport {
                rank,
                senders: senders.clone(),
                down: AtomicBool::new(false),
            });
            (t, rx)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Socket transport
// ---------------------------------------------------------------------------

pub struct SocketTransport {
    rank: usize,
    writers: Vec<Option<Mutex<TcpStream>>>,
    down: AtomicBool,
}

impl Transport for SocketTransport {
    fn send_bytes(&self, dst: usize, bytes: Vec<u8>) -> Result<()> {
        debug_assert_ne!(dst, self.rank);
        if self.down.load(Ordering::Acquire) {
            return Err(RuntimeError::TransportDown("socket fabric closed".into()));
        }
        let writer = self
            .writers
            .get(dst)
            .and_then(|w| w.as_ref())
            .ok_or(RuntimeError::UnknownLocality { rank: dst, world: self.writers.len() })?;
        let mut stream = writer.lock().unwrap();
        stream
            .write_all(&bytes)
            .map_err(|e| RuntimeError::TransportDown(format!("write to rank {dst}: {e}")))
    }

    fn shutdown(&self) {
        if self.down.swap(true, Ordering::AcqRel) {
            return;
        }
        for w in self.writers.iter().flatten() {
            let _ = w.lock().unwrap().shutdown(std::net::Shutdown::Both);
        }
    }
}

fn spawn_reader(stream: TcpStream, tx: Sender<Vec<u8>>) {
    std::thread::Builder::new()
        .name("tla-sock-reader".into())
        .spawn(move || {
            let mut reader = std::io::BufReader::new(stream);
            while let Ok(Some(bytes)) = read_frame_bytes(&mut reader) {
                if tx.send(bytes).is_err() {
                    break;
                }
            }
        })
        .expect("spawn reader");
}

/// Establish the TCP mesh for `rank`: accept connections from higher ranks,
/// dial lower ranks (retrying until `deadline`), and exchange handshakes.
pub fn socket_endpoint(
    listener: TcpListener,
    rank: usize,
    world: usize,
    addrs: &[SocketAddr],
    deadline: Duration,
) -> Result<Endpoint> {
    assert_eq!(addrs.len(), world);
    let (tx, rx) = std::sync::mpsc::channel::<Vec<u8>>();
    let mut writers: Vec<Option<Mutex<TcpStream>>> = (0..world).map(|_| None).collect();

    let accept_from_higher = world - 1 - rank;
    let acceptor = {
        let tx = tx.clone();
        std::thread::Builder::new()
            .name("tla-sock-accept".into())
            .spawn(move || -> Result<Vec<(usize, TcpStream)>> {
                let mut accepted = Vec::with_capacity(accept_from_higher);
                for _ in 0..accept_from_higher {
                    let (stream, _) = listener
                        .accept()
                        .map_err(|e| RuntimeError::TransportDown(format!("accept: {e}")))?;
                    stream.set_nodelay(true).ok();
                    let mut reader = std::io::BufReader::new(
                        stream.try_clone().map_err(|e| RuntimeError::TransportDown(e.to_string()))?,
                    );
                    let bytes = read_frame_bytes(&mut reader)
                        .map_err(|e| RuntimeError::TransportDown(format!("handshake read: {e}")))?
                        .ok_or_else(|| RuntimeError::TransportDown("eof before handshake".into()))?;
                    let frame = decode_frame(&bytes)?;
                    let (peer, peer_world) = frame
                        .parse_handshake()
                        .ok_or_else(|| RuntimeError::TransportDown("expected handshake".into()))?;
                    if peer_world as usize != world {
                        return Err(RuntimeError::TransportDown(format!(
                            "world size mismatch: local {world}, peer {peer_world}"
                        )));
                    }
                    spawn_reader(stream.try_clone().unwrap(), tx.clone());
                    accepted.push((peer as usize, stream));
                }
                Ok(accepted)
            })
            .expect("spawn acceptor")
    };

    // Dial every lower rank, announcing ourselves with a handshake frame.
    let start = Instant::now();
    for peer in 0..rank {
        let stream = loop {
            match TcpStream::connect(addrs[peer]) {
                Ok(s) => break s,
                Err(e) => {
                    if start.elapsed() > deadline {
                        return Err(RuntimeError::TransportDown(format!(
                            "connect to rank {peer} at {}: {e}",
                            addrs[peer]
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        };
        stream.set_nodelay(true).ok();
        let hs = encode_frame(&Frame::handshake(rank as u16, world as u16));
        let mut s = stream.try_clone().map_err(|e| RuntimeError::TransportDown(e.to_string()))?;
        s.write_all(&hs).map_err(|e| RuntimeError::TransportDown(format!("handshake: {e}")))?;
        spawn_reader(stream.try_clone().unwrap(), tx.clone());
        writers[peer] = Some(Mutex::new(stream));
    }

    for (peer, stream) in acceptor.join().expect("acceptor thread")? {
        writers[peer] = Some(Mutex::new(stream));
    }

    let t: Arc<dyn Transport> =
        Arc::new(SocketTransport { rank, writers, down: AtomicBool::new(false) });
    Ok((t, rx))
}

/// Bind `world` listeners on ephemeral local ports (for hosting socket
/// localities as threads within one process).
pub fn bind_local_mesh(world: usize) -> std::io::Result<(Vec<SocketAddr>, Vec<TcpListener>)> {
    let mut addrs = Vec::with_capacity(world);
    let mut listeners = Vec::with_capacity(world);
    for _ in 0..world {
        let l = TcpListener::bind(("127.0.0.1", 0))?;
        addrs.push(l.local_addr()?);
        listeners.push(l);
    }
    Ok((addrs, listeners))
}
