//! Message passing between `R` logical ranks.
//!
//! A [`RankEndpoint`] is one rank's view of the session. It offers the handful of
//! collectives the renderer needs: a unidirectional ring shift, gather to rank 0,
//! broadcast from rank 0 and a barrier. Two backends exist: threads in one process
//! connected by bounded channels, and TCP sockets carrying `DPRT` frames.
//!
//! Every message carries a per-(sender, receiver, kind) sequence number. A receiver that
//! sees the wrong kind or an unexpected sequence reports a protocol error, which is how
//! mismatched collective participation surfaces.

mod socket;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

pub use socket::{connect_socket_rank, init_socket_local};
pub use wire::MsgKind;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const TIMEOUT_ENV: &str = "DPRT_TIMEOUT_SECS";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("startup failed on rank {rank}: {reason}")]
    Startup { rank: usize, reason: String },
    #[error("rank {rank}: timed out in {op} waiting for rank {peer}")]
    Timeout {
        rank: usize,
        peer: usize,
        op: &'static str,
    },
    #[error("rank {rank}: peer {peer} disconnected during {op} (exchange step {step})")]
    PeerDisconnected {
        rank: usize,
        peer: usize,
        op: &'static str,
        step: u64,
    },
    #[error("rank {rank}: protocol error from rank {peer}: {reason}")]
    Protocol {
        rank: usize,
        peer: usize,
        reason: String,
    },
    #[error("rank {rank}: i/o error talking to rank {peer}: {source}")]
    Io {
        rank: usize,
        peer: usize,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Inproc,
    Socket,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(Backend::Inproc),
            "socket" => Ok(Backend::Socket),
            other => Err(format!("unknown backend `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    /// Deadline for any single collective wait and for socket startup.
    pub timeout: Duration,
    /// Bounded queue depth per in-process link.
    pub queue_depth: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            timeout: DEFAULT_TIMEOUT,
            queue_depth: 64,
        }
    }
}

impl TransportConfig {
    /// Default configuration with `DPRT_TIMEOUT_SECS` applied when set.
    pub fn from_env() -> Self {
        let mut cfg = TransportConfig::default();
        if let Some(secs) = std::env::var(TIMEOUT_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
        {
            if secs > 0.0 && secs.is_finite() {
                cfg.timeout = Duration::from_secs_f64(secs);
            }
        }
        cfg
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// One message as seen by the receiving rank.
#[derive(Debug, Clone)]
pub(crate) struct Envelope {
    pub kind: MsgKind,
    pub sequence: u64,
    pub payload: Vec<u8>,
}

pub(crate) type Incoming = Result<Envelope, String>;

pub(crate) enum PeerTx {
    Channel(Sender<Incoming>),
    Socket(std::net::TcpStream),
}

pub(crate) struct Peer {
    pub tx: PeerTx,
    pub rx: Receiver<Incoming>,
}

/// Payload counters by message kind, shared so they can be observed from other threads.
#[derive(Debug, Default)]
pub struct TrafficCounters {
    messages: [AtomicU64; 6],
    bytes: [AtomicU64; 6],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub messages: u64,
    pub bytes: u64,
}

impl TrafficCounters {
    fn record(&self, kind: MsgKind, bytes: usize) {
        self.messages[kind.slot()].fetch_add(1, Ordering::Relaxed);
        self.bytes[kind.slot()].fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn kind(&self, kind: MsgKind) -> TrafficStats {
        TrafficStats {
            messages: self.messages[kind.slot()].load(Ordering::Relaxed),
            bytes: self.bytes[kind.slot()].load(Ordering::Relaxed),
        }
    }

    pub fn total(&self) -> TrafficStats {
        MsgKind::ALL
            .iter()
            .fold(TrafficStats::default(), |acc, &k| {
                let s = self.kind(k);
                TrafficStats {
                    messages: acc.messages + s.messages,
                    bytes: acc.bytes + s.bytes,
                }
            })
    }
}

pub struct RankEndpoint {
    rank: usize,
    size: usize,
    peers: Vec<Peer>,
    send_seq: Vec<[u64; 6]>,
    recv_seq: Vec<[u64; 6]>,
    timeout: Duration,
    traffic: Arc<TrafficCounters>,
    exchange_step: u64,
}

impl std::fmt::Debug for RankEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RankEndpoint")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .finish()
    }
}

/// Creates all `ranks` endpoints. The caller hands each one to its own thread.
pub fn init_ranks(
    ranks: usize,
    backend: Backend,
    config: &TransportConfig,
) -> Result<Vec<RankEndpoint>, TransportError> {
    if ranks == 0 {
        return Err(TransportError::Startup {
            rank: 0,
            reason: "rank count must be at least 1".into(),
        });
    }
    match backend {
        Backend::Inproc => Ok(init_inproc(ranks, config)),
        Backend::Socket => init_socket_local(ranks, config),
    }
}

fn init_inproc(ranks: usize, config: &TransportConfig) -> Vec<RankEndpoint> {
    // links[src][dst]
    let mut senders: Vec<Vec<Option<Sender<Incoming>>>> = vec![vec![None; ranks]; ranks];
    let mut receivers: Vec<Vec<Option<Receiver<Incoming>>>> = (0..ranks)
        .map(|_| (0..ranks).map(|_| None).collect())
        .collect();
    for (src, row) in senders.iter_mut().enumerate() {
        for (dst, slot) in row.iter_mut().enumerate() {
            let (tx, rx) = bounded(config.queue_depth.max(1));
            *slot = Some(tx);
            receivers[dst][src] = Some(rx);
        }
    }
    (0..ranks)
        .map(|rank| {
            let peers = (0..ranks)
                .map(|peer| Peer {
                    tx: PeerTx::Channel(senders[rank][peer].take().expect("link")),
                    rx: receivers[rank][peer].take().expect("link"),
                })
                .collect();
            RankEndpoint::from_peers(rank, ranks, peers, config)
        })
        .collect()
}

impl RankEndpoint {
    pub(crate) fn from_peers(
        rank: usize,
        size: usize,
        peers: Vec<Peer>,
        config: &TransportConfig,
    ) -> RankEndpoint {
        RankEndpoint {
            rank,
            size,
            peers,
            send_seq: vec![[0; 6]; size],
            recv_seq: vec![[0; 6]; size],
            timeout: config.timeout,
            traffic: Arc::new(TrafficCounters::default()),
            exchange_step: 0,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    pub fn next_rank(&self) -> usize {
        (self.rank + 1) % self.size
    }

    pub fn prev_rank(&self) -> usize {
        (self.rank + self.size - 1) % self.size
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Counters for payload bytes this endpoint has sent.
    pub fn traffic(&self) -> Arc<TrafficCounters> {
        self.traffic.clone()
    }

    /// Number of completed ring exchanges.
    pub fn exchange_step(&self) -> u64 {
        self.exchange_step
    }

    fn send(
        &mut self,
        dst: usize,
        kind: MsgKind,
        payload: Vec<u8>,
        op: &'static str,
    ) -> Result<(), TransportError> {
        let seq = self.send_seq[dst][kind.slot()];
        self.send_seq[dst][kind.slot()] += 1;
        self.traffic.record(kind, payload.len());
        let rank = self.rank;
        let step = self.exchange_step;
        match &mut self.peers[dst].tx {
            PeerTx::Channel(tx) => tx
                .send(Ok(Envelope {
                    kind,
                    sequence: seq,
                    payload,
                }))
                .map_err(|_| TransportError::PeerDisconnected {
                    rank,
                    peer: dst,
                    op,
                    step,
                }),
            PeerTx::Socket(stream) => {
                let mut body = Vec::with_capacity(8 + payload.len());
                body.extend_from_slice(&seq.to_le_bytes());
                body.extend_from_slice(&payload);
                wire::write_frame(stream, kind, &body).map_err(|e| match e.kind() {
                    std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => {
                        TransportError::PeerDisconnected {
                            rank,
                            peer: dst,
                            op,
                            step,
                        }
                    }
                    _ => TransportError::Io {
                        rank,
                        peer: dst,
                        source: e,
                    },
                })
            }
        }
    }

    fn recv(
        &mut self,
        src: usize,
        kind: MsgKind,
        op: &'static str,
    ) -> Result<Vec<u8>, TransportError> {
        let rank = self.rank;
        let env = match self.peers[src].rx.recv_timeout(self.timeout) {
            Ok(Ok(env)) => env,
            Ok(Err(reason)) => {
                return Err(TransportError::Protocol {
                    rank,
                    peer: src,
                    reason,
                })
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(TransportError::Timeout {
                    rank,
                    peer: src,
                    op,
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(TransportError::PeerDisconnected {
                    rank,
                    peer: src,
                    op,
                    step: self.exchange_step,
                })
            }
        };
        if env.kind != kind {
            return Err(TransportError::Protocol {
                rank,
                peer: src,
                reason: format!("expected {kind:?} during {op}, received {:?}", env.kind),
            });
        }
        let expected = self.recv_seq[src][kind.slot()];
        if env.sequence != expected {
            return Err(TransportError::Protocol {
                rank,
                peer: src,
                reason: format!(
                    "{kind:?} sequence {} where {expected} was expected",
                    env.sequence
                ),
            });
        }
        self.recv_seq[src][kind.slot()] += 1;
        Ok(env.payload)
    }

    /// Sends `outgoing` to the next rank and returns what the previous rank sent.
    pub fn ring_exchange(&mut self, outgoing: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        let next = self.next_rank();
        let prev = self.prev_rank();
        self.send(next, MsgKind::RayBatch, outgoing, "ring_exchange")?;
        let incoming = self.recv(prev, MsgKind::RayBatch, "ring_exchange")?;
        self.exchange_step += 1;
        Ok(incoming)
    }

    /// Rank 0 gets every rank's tile in rank order; other ranks get `None`.
    pub fn gather_to_root(
        &mut self,
        tile: Vec<u8>,
    ) -> Result<Option<Vec<Vec<u8>>>, TransportError> {
        if self.rank != 0 {
            self.send(0, MsgKind::Tile, tile, "gather_to_root")?;
            return Ok(None);
        }
        let mut tiles = Vec::with_capacity(self.size);
        tiles.push(tile);
        for src in 1..self.size {
            tiles.push(self.recv(src, MsgKind::Tile, "gather_to_root")?);
        }
        Ok(Some(tiles))
    }

    /// Root supplies `data`; every rank returns the root's bytes.
    pub fn broadcast(&mut self, data: Option<Vec<u8>>) -> Result<Vec<u8>, TransportError> {
        if self.rank == 0 {
            let data = data.expect("root must supply broadcast data");
            for dst in 1..self.size {
                self.send(dst, MsgKind::Control, data.clone(), "broadcast")?;
            }
            Ok(data)
        } else {
            self.recv(0, MsgKind::Control, "broadcast")
        }
    }

    pub fn barrier(&mut self) -> Result<(), TransportError> {
        if self.size == 1 {
            return Ok(());
        }
        if self.rank == 0 {
            for src in 1..self.size {
                self.recv(src, MsgKind::Barrier, "barrier")?;
            }
            for dst in 1..self.size {
                self.send(dst, MsgKind::Barrier, Vec::new(), "barrier")?;
            }
        } else {
            self.send(0, MsgKind::Barrier, Vec::new(), "barrier")?;
            self.recv(0, MsgKind::Barrier, "barrier")?;
        }
        Ok(())
    }

    /// Every rank receives every rank's contribution, indexed by rank, by cycling the
    /// pieces around the ring `R - 1` times.
    pub fn all_gather(&mut self, mine: Vec<u8>) -> Result<Vec<Vec<u8>>, TransportError> {
        let mut out = vec![Vec::new(); self.size];
        let mut carry = mine.clone();
        out[self.rank] = mine;
        for hop in 1..self.size {
            carry = self.ring_exchange(carry)?;
            let origin = (self.rank + self.size - hop) % self.size;
            out[origin] = carry.clone();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::thread;

    /// Runs `f` on every endpoint in its own thread; results in rank order.
    pub(crate) fn run_ranks<T: Send + 'static>(
        eps: Vec<RankEndpoint>,
        f: impl Fn(RankEndpoint) -> T + Send + Sync + Clone + 'static,
    ) -> Vec<T> {
        let handles: Vec<_> = eps
            .into_iter()
            .map(|ep| {
                let f = f.clone();
                thread::spawn(move || f(ep))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread"))
            .collect()
    }

    fn quick() -> TransportConfig {
        TransportConfig::default().with_timeout(Duration::from_millis(400))
    }

    #[test]
    fn single_rank_ring_delivers_to_self() {
        let mut eps = init_ranks(1, Backend::Inproc, &quick()).unwrap();
        let ep = &mut eps[0];
        assert_eq!(ep.ring_exchange(b"me".to_vec()).unwrap(), b"me");
        assert_eq!(
            ep.gather_to_root(b"t".to_vec()).unwrap(),
            Some(vec![b"t".to_vec()])
        );
        ep.barrier().unwrap();
    }

    #[test]
    fn ring_shift_and_closure() {
        let eps = init_ranks(3, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            let name = [b'A' + ep.rank() as u8];
            let first = ep.ring_exchange(name.to_vec()).unwrap();
            let second = ep.ring_exchange(first.clone()).unwrap();
            let third = ep.ring_exchange(second).unwrap();
            (first, third == name)
        });
        assert_eq!(out[0].0, b"C");
        assert_eq!(out[1].0, b"A");
        assert_eq!(out[2].0, b"B");
        assert!(out.iter().all(|(_, closed)| *closed));
    }

    #[test]
    fn gather_orders_by_rank() {
        let eps = init_ranks(4, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            ep.gather_to_root(format!("t{}", ep.rank()).into_bytes())
                .unwrap()
        });
        let root = out[0].clone().unwrap();
        assert_eq!(
            root,
            vec![
                b"t0".to_vec(),
                b"t1".to_vec(),
                b"t2".to_vec(),
                b"t3".to_vec()
            ]
        );
        assert!(out[1..].iter().all(Option::is_none));
    }

    #[test]
    fn gather_names_the_absent_rank() {
        let eps = init_ranks(3, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            if ep.rank() == 2 {
                // stay alive past the deadline without participating
                thread::sleep(Duration::from_millis(800));
                return None;
            }
            Some(ep.gather_to_root(vec![1]).map(|_| ()))
        });
        match &out[0] {
            Some(Err(TransportError::Timeout {
                peer: 2,
                op: "gather_to_root",
                ..
            })) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn barrier_waits_for_last_entry() {
        let eps = init_ranks(4, Backend::Inproc, &quick()).unwrap();
        let entered = Arc::new(AtomicU64::new(0));
        let out = run_ranks(eps, {
            let entered = entered.clone();
            move |mut ep| {
                thread::sleep(Duration::from_millis(40 * ep.rank() as u64));
                entered.fetch_add(1, Ordering::SeqCst);
                ep.barrier().unwrap();
                entered.load(Ordering::SeqCst)
            }
        });
        assert_eq!(out, vec![4, 4, 4, 4]);
    }

    #[test]
    fn barrier_times_out_without_a_rank() {
        let eps = init_ranks(3, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            if ep.rank() == 1 {
                thread::sleep(Duration::from_millis(1200));
                return true;
            }
            // rank 2 may instead see rank 0 hang up after its own timeout
            matches!(
                ep.barrier(),
                Err(TransportError::Timeout { .. } | TransportError::PeerDisconnected { .. })
            )
        });
        assert_eq!(out, vec![true, true, true]);
    }

    #[test]
    fn mismatched_collectives_are_protocol_errors() {
        let eps = init_ranks(2, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            if ep.rank() == 0 {
                ep.gather_to_root(vec![0])
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            } else {
                // rank 1 sends a broadcast-kind message where a tile is expected
                ep.send(0, MsgKind::Control, vec![9], "test").unwrap();
                Ok(())
            }
        });
        let err = out[0].clone().unwrap_err();
        assert!(err.contains("protocol error from rank 1"), "{err}");
    }

    #[test]
    fn all_gather_collects_every_rank() {
        let eps = init_ranks(5, Backend::Inproc, &quick()).unwrap();
        let out = run_ranks(eps, |mut ep| {
            ep.all_gather(vec![ep.rank() as u8; ep.rank() + 1]).unwrap()
        });
        for got in out {
            for (r, piece) in got.iter().enumerate() {
                assert_eq!(piece, &vec![r as u8; r + 1]);
            }
        }
    }

    #[test]
    fn timeout_env_override() {
        // the variable name is part of the external interface
        assert_eq!(TIMEOUT_ENV, "DPRT_TIMEOUT_SECS");
        assert_eq!(TransportConfig::default().timeout, Duration::from_secs(30));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ring_preserves_send_order(ranks in 1usize..6, msgs in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..32), 1..12)) {
            let eps = init_ranks(ranks, Backend::Inproc, &quick()).unwrap();
            let msgs = Arc::new(msgs);
            let out = run_ranks(eps, {
                let msgs = msgs.clone();
                move |mut ep| {
                    let tag = ep.rank() as u8;
                    msgs.iter()
                        .map(|m| {
                            let mut m = m.clone();
                            m.push(tag);
                            ep.ring_exchange(m).unwrap()
                        })
                        .collect::<Vec<_>>()
                }
            });
            for (rank, got) in out.iter().enumerate() {
                let prev = ((rank + ranks - 1) % ranks) as u8;
                for (m, g) in msgs.iter().zip(got) {
                    let mut want = m.clone();
                    want.push(prev);
                    prop_assert_eq!(g, &want);
                }
            }
        }
    }
}
