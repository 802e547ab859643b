//! TCP backend: a full mesh of connections, one per rank pair.
//!
//! Rank `r` connects to every lower rank and accepts from every higher one, announcing
//! itself with a `CONTROL` hello carrying `(rank, size)`. Each connection gets a reader
//! thread that decodes frames into a channel, so a rank blocked in a large send never
//! deadlocks against a peer doing the same. Rank-to-rank frame payloads start with the
//! 8-byte little-endian stream sequence number.

use std::collections::BTreeSet;
use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Sender};

use super::wire::{self, MsgKind};
use super::{Envelope, Incoming, Peer, PeerTx, RankEndpoint, TransportConfig, TransportError};

const RETRY_INTERVAL: Duration = Duration::from_millis(20);

/// Starts `ranks` socket endpoints on loopback inside this process.
pub fn init_socket_local(
    ranks: usize,
    config: &TransportConfig,
) -> Result<Vec<RankEndpoint>, TransportError> {
    let mut listeners = Vec::with_capacity(ranks);
    let mut addrs = Vec::with_capacity(ranks);
    for rank in 0..ranks {
        let l = TcpListener::bind("127.0.0.1:0").map_err(|e| TransportError::Startup {
            rank,
            reason: format!("bind: {e}"),
        })?;
        addrs.push(l.local_addr().map_err(|e| TransportError::Startup {
            rank,
            reason: e.to_string(),
        })?);
        listeners.push(l);
    }
    let handles: Vec<_> = listeners
        .into_iter()
        .enumerate()
        .map(|(rank, listener)| {
            let addrs = addrs.clone();
            let config = config.clone();
            thread::spawn(move || connect_socket_rank(rank, listener, &addrs, &config))
        })
        .collect();
    let mut out = Vec::with_capacity(ranks);
    let mut first_err = None;
    for h in handles {
        match h.join().expect("socket startup thread") {
            Ok(ep) => out.push(ep),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Joins the mesh as `rank`. `addrs[i]` is where rank `i` listens; `listener` is ours.
pub fn connect_socket_rank(
    rank: usize,
    listener: TcpListener,
    addrs: &[SocketAddr],
    config: &TransportConfig,
) -> Result<RankEndpoint, TransportError> {
    let size = addrs.len();
    let startup = |reason: String| TransportError::Startup { rank, reason };
    if rank >= size {
        return Err(startup(format!("rank {rank} outside session of {size}")));
    }
    let deadline = Instant::now() + config.timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

    for (peer, addr) in addrs.iter().enumerate().take(rank) {
        let stream = loop {
            match TcpStream::connect_timeout(addr, RETRY_INTERVAL.max(Duration::from_millis(200))) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::trace!("rank {rank}: connect to {peer} failed ({e}), retrying");
                    thread::sleep(RETRY_INTERVAL);
                }
                Err(e) => {
                    return Err(startup(format!(
                        "timed out connecting to rank {peer} at {addr}: {e}"
                    )))
                }
            }
        };
        let mut stream = stream;
        let mut hello = Vec::with_capacity(8);
        hello.extend_from_slice(&(rank as u32).to_le_bytes());
        hello.extend_from_slice(&(size as u32).to_le_bytes());
        wire::write_frame(&mut stream, MsgKind::Control, &hello)
            .map_err(|e| startup(format!("hello to {peer}: {e}")))?;
        streams[peer] = Some(stream);
    }

    let mut missing: BTreeSet<usize> = (rank + 1..size).collect();
    listener
        .set_nonblocking(true)
        .map_err(|e| startup(e.to_string()))?;
    while !missing.is_empty() {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| startup(e.to_string()))?;
                let remaining = deadline
                    .saturating_duration_since(Instant::now())
                    .max(Duration::from_millis(10));
                stream
                    .set_read_timeout(Some(remaining))
                    .map_err(|e| startup(e.to_string()))?;
                let (kind, body) = match wire::read_frame(&mut stream) {
                    Ok(Some(f)) => f,
                    Ok(None) => return Err(startup("connection closed before hello".into())),
                    Err(e) => return Err(startup(format!("reading hello: {e}"))),
                };
                if kind != MsgKind::Control || body.len() != 8 {
                    return Err(startup("malformed hello".into()));
                }
                let peer = u32::from_le_bytes(body[0..4].try_into().expect("4 bytes")) as usize;
                let their_size =
                    u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
                if their_size != size {
                    return Err(startup(format!(
                        "rank {peer} believes the session has {their_size} ranks"
                    )));
                }
                if peer <= rank || peer >= size {
                    return Err(startup(format!("unexpected hello from rank {peer}")));
                }
                if !missing.remove(&peer) {
                    return Err(startup(format!("duplicate rank id {peer}")));
                }
                streams[peer] = Some(stream);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(startup(format!("timed out waiting for ranks {missing:?}")));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(startup(format!("accept: {e}"))),
        }
    }

    let mut peers = Vec::with_capacity(size);
    for (peer, slot) in streams.into_iter().enumerate() {
        match slot {
            None => {
                // self link
                let (tx, rx) = bounded(config.queue_depth.max(1));
                peers.push(Peer {
                    tx: PeerTx::Channel(tx),
                    rx,
                });
            }
            Some(stream) => {
                stream
                    .set_read_timeout(None)
                    .map_err(|e| startup(e.to_string()))?;
                stream
                    .set_nodelay(true)
                    .map_err(|e| startup(e.to_string()))?;
                let reader = stream.try_clone().map_err(|e| startup(e.to_string()))?;
                let (tx, rx) = unbounded();
                thread::Builder::new()
                    .name(format!("dprt-r{rank}-from{peer}"))
                    .spawn(move || pump(reader, tx))
                    .map_err(|e| startup(e.to_string()))?;
                peers.push(Peer {
                    tx: PeerTx::Socket(stream),
                    rx,
                });
            }
        }
    }

    let mut ep = RankEndpoint::from_peers(rank, size, peers, config);
    ep.barrier()
        .map_err(|e| startup(format!("readiness barrier: {e}")))?;
    Ok(ep)
}

fn pump(mut reader: TcpStream, tx: Sender<Incoming>) {
    loop {
        match wire::read_frame(&mut reader) {
            Ok(Some((kind, body))) => {
                if body.len() < 8 {
                    let _ = tx.send(Err("frame shorter than its sequence number".into()));
                    return;
                }
                let sequence = u64::from_le_bytes(body[..8].try_into().expect("8 bytes"));
                let env = Envelope {
                    kind,
                    sequence,
                    payload: body[8..].to_vec(),
                };
                if tx.send(Ok(env)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset
                ) =>
            {
                return
            }
            Err(e) => {
                let _ = tx.send(Err(e.to_string()));
                return;
            }
        }
    }
}

impl Drop for RankEndpoint {
    fn drop(&mut self) {
        for p in &self.peers {
            if let PeerTx::Socket(s) = &p.tx {
                // wakes both reader threads with EOF
                let _ = s.shutdown(Shutdown::Both);
            }
        }
    }
}
