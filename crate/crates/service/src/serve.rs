//! Render service: one thin client at a time steers the camera, every rank renders each
//! frame collectively, and rank 0 streams the result back.
//!
//! Client bytes are only read between frames. Whatever arrived while a frame was being
//! rendered is decoded in one go and only the newest camera update is applied.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use dprt_core::engine::{render_frame, EngineError, RankScene, RenderOptions};
use dprt_core::geom::{CameraSpec, Vec3};
use dprt_core::scene::{partition_scene, PartitionStrategy, SceneDesc};
use dprt_core::transport::{init_ranks, Backend, RankEndpoint, TransportConfig};
use thiserror::Error;
use tungstenite::protocol::WebSocket;
use tungstenite::Message as WsMessage;

use crate::protocol::{
    encode_message, ControlMessage, FrameMessage, Message, PixelFormat, StreamDecoder,
};

/// How long a worker waits for the next command before giving up on the root.
const IDLE_TIMEOUT: Duration = Duration::from_secs(365 * 24 * 3600);
const ACCEPT_POLL: Duration = Duration::from_millis(10);
const CLIENT_POLL: Duration = Duration::from_millis(20);
/// A browser sends its upgrade request right away; raw clients may wait for `hello`.
const SNIFF_TIMEOUT: Duration = Duration::from_millis(500);

const CMD_STOP: u8 = 0;
const CMD_RENDER: u8 = 1;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("malformed command from root: {0}")]
    Command(String),
}

impl From<dprt_core::transport::TransportError> for ServeError {
    fn from(e: dprt_core::transport::TransportError) -> Self {
        ServeError::Engine(e.into())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    pub render: RenderOptions,
    /// Per-round records of every frame, appended.
    pub stats_log: Option<PathBuf>,
    /// Frames are paced to at least this period.
    pub min_frame_millis: u64,
    /// Stop after this many sessions have ended.
    pub max_sessions: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServeReport {
    pub sessions: usize,
    pub frames: u64,
    /// Connections turned away with `busy`.
    pub refused: usize,
}

enum Link {
    Tcp(TcpStream),
    Ws(Box<WebSocket<TcpStream>>),
}

/// A connected thin client, raw TCP or upgraded websocket.
pub struct Client {
    link: Link,
    decoder: StreamDecoder,
    peer: SocketAddr,
}

enum Polled {
    Messages(Vec<Message>),
    Closed,
}

impl Client {
    /// Sniffs the first bytes and performs the websocket handshake if they are an HTTP
    /// request.
    pub fn accept(stream: TcpStream) -> io::Result<Client> {
        let peer = stream.peer_addr()?;
        stream.set_nonblocking(false)?;
        let link = if looks_like_http(&stream)? {
            stream.set_read_timeout(Some(Duration::from_secs(5)))?;
            let ws = tungstenite::accept(stream).map_err(|e| {
                io::Error::new(ErrorKind::InvalidData, format!("websocket handshake: {e}"))
            })?;
            Link::Ws(Box::new(ws))
        } else {
            Link::Tcp(stream)
        };
        Ok(Client {
            link,
            decoder: StreamDecoder::new(),
            peer,
        })
    }

    pub fn is_websocket(&self) -> bool {
        matches!(self.link, Link::Ws(_))
    }

    pub fn send(&mut self, msg: &Message) -> io::Result<()> {
        let bytes = encode_message(msg);
        match &mut self.link {
            Link::Tcp(s) => {
                s.set_nonblocking(false)?;
                s.write_all(&bytes)?;
                s.flush()
            }
            Link::Ws(ws) => {
                ws.get_mut().set_nonblocking(false)?;
                ws.send(WsMessage::Binary(bytes.into())).map_err(ws_io)
            }
        }
    }

    /// Reads everything the client has sent so far, waiting up to `wait` for the first
    /// bytes.
    fn poll(&mut self, wait: Duration) -> io::Result<Polled> {
        let mut closed = false;
        match &mut self.link {
            Link::Tcp(s) => {
                let mut chunk = [0u8; 16 * 1024];
                let mut blocking = !wait.is_zero();
                loop {
                    if blocking {
                        s.set_nonblocking(false)?;
                        s.set_read_timeout(Some(wait))?;
                    } else {
                        s.set_nonblocking(true)?;
                    }
                    match s.read(&mut chunk) {
                        Ok(0) => {
                            closed = true;
                            break;
                        }
                        Ok(n) => self.decoder.push(&chunk[..n]),
                        Err(e) if would_block(&e) => break,
                        Err(e) if e.kind() == ErrorKind::ConnectionReset => {
                            closed = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                    blocking = false;
                }
                s.set_nonblocking(false)?;
            }
            Link::Ws(ws) => {
                let mut blocking = !wait.is_zero();
                loop {
                    if blocking {
                        ws.get_mut().set_nonblocking(false)?;
                        ws.get_mut().set_read_timeout(Some(wait))?;
                    } else {
                        ws.get_mut().set_nonblocking(true)?;
                    }
                    match ws.read() {
                        Ok(WsMessage::Binary(b)) => self.decoder.push(&b),
                        Ok(WsMessage::Close(_)) => {
                            closed = true;
                            break;
                        }
                        Ok(WsMessage::Text(_)) => {
                            return Err(io::Error::new(
                                ErrorKind::InvalidData,
                                "text websocket messages are not part of the protocol",
                            ))
                        }
                        Ok(_) => {}
                        Err(tungstenite::Error::Io(e)) if would_block(&e) => break,
                        Err(
                            tungstenite::Error::ConnectionClosed
                            | tungstenite::Error::AlreadyClosed,
                        ) => {
                            closed = true;
                            break;
                        }
                        Err(tungstenite::Error::Io(e))
                            if e.kind() == ErrorKind::ConnectionReset =>
                        {
                            closed = true;
                            break;
                        }
                        Err(e) => return Err(ws_io(e)),
                    }
                    blocking = false;
                }
                ws.get_mut().set_nonblocking(false)?;
            }
        }
        let mut msgs = Vec::new();
        while let Some(m) = self
            .decoder
            .next_message()
            .map_err(|e| io::Error::new(ErrorKind::InvalidData, e))?
        {
            msgs.push(m);
        }
        if closed && msgs.is_empty() {
            return Ok(Polled::Closed);
        }
        Ok(Polled::Messages(msgs))
    }

    fn close(&mut self) {
        if let Link::Ws(ws) = &mut self.link {
            let _ = ws.get_mut().set_nonblocking(false);
            let _ = ws.close(None);
            let _ = ws.flush();
        }
    }
}

fn looks_like_http(stream: &TcpStream) -> io::Result<bool> {
    const PREFIX: &[u8] = b"GET ";
    let deadline = Instant::now() + SNIFF_TIMEOUT;
    let mut buf = [0u8; 4];
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(false);
        }
        stream.set_read_timeout(Some(left))?;
        match stream.peek(&mut buf) {
            Ok(0) => return Ok(false),
            Ok(n) if buf[..n] != PREFIX[..n] => return Ok(false),
            Ok(4) => return Ok(true),
            Ok(_) => thread::sleep(Duration::from_millis(2)),
            Err(e) if would_block(&e) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
}

fn would_block(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

fn ws_io(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

fn encode_command(cam: &CameraSpec, width: u32, height: u32) -> Vec<u8> {
    let mut out = vec![CMD_RENDER];
    for v in [cam.position, cam.view_dir, cam.up] {
        for c in v.to_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out.extend_from_slice(&cam.fov_y.to_le_bytes());
    out.extend_from_slice(&cam.aspect.to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out
}

fn decode_command(bytes: &[u8]) -> Result<Option<(CameraSpec, u32, u32)>, ServeError> {
    match bytes.first() {
        Some(&CMD_STOP) if bytes.len() == 1 => Ok(None),
        Some(&CMD_RENDER) if bytes.len() == 1 + 11 * 8 + 8 => {
            let f = |i: usize| {
                let at = 1 + 8 * i;
                f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
            };
            let v = |i: usize| Vec3::new(f(i), f(i + 1), f(i + 2));
            let u = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            let cam = CameraSpec {
                position: v(0),
                view_dir: v(3),
                up: v(6),
                fov_y: f(9),
                aspect: f(10),
            };
            Ok(Some((cam, u(89), u(93))))
        }
        _ => Err(ServeError::Command(format!("{} bytes", bytes.len()))),
    }
}

/// Command loop for ranks other than 0. Returns the number of frames rendered once the
/// root broadcasts stop.
pub fn run_worker(
    ep: &mut RankEndpoint,
    scene: &RankScene,
    opts: &RenderOptions,
) -> Result<u64, ServeError> {
    let collective_timeout = ep.timeout();
    let mut frames = 0;
    loop {
        ep.set_timeout(IDLE_TIMEOUT);
        let cmd = ep.broadcast(None);
        ep.set_timeout(collective_timeout);
        let Some((cam, w, h)) = decode_command(&cmd?)? else {
            log::debug!("rank {}: stop after {frames} frames", ep.rank());
            return Ok(frames);
        };
        match render_frame(ep, scene, &cam, w, h, opts) {
            Ok(_) => frames += 1,
            Err(EngineError::Transport(e)) => return Err(EngineError::Transport(e).into()),
            Err(e) => log::warn!("rank {}: frame failed: {e}", ep.rank()),
        }
    }
}

struct Root<'a> {
    ep: &'a mut RankEndpoint,
    scene: &'a RankScene,
    opts: &'a ServeOptions,
    stats: Option<BufWriter<File>>,
    report: ServeReport,
}

enum SessionEnd {
    Client,
    Stopped,
}

impl Root<'_> {
    fn session(&mut self, mut client: Client, stop: &AtomicBool) -> Result<SessionEnd, ServeError> {
        let bounds = self.scene.scene_bounds;
        let (center, diagonal) = if bounds.is_empty() {
            (Vec3::ZERO, 1.0)
        } else {
            (bounds.center(), bounds.diagonal())
        };
        client.send(&Message::Control(ControlMessage::Hello {
            ranks: self.ep.size() as u32,
            diagonal,
            center,
        }))?;
        let mut sequence = 0u32;
        let started = Instant::now();
        loop {
            if stop.load(Ordering::SeqCst) {
                let _ = client.send(&Message::Control(ControlMessage::Bye));
                client.close();
                return Ok(SessionEnd::Stopped);
            }
            let msgs = match client.poll(CLIENT_POLL) {
                Ok(Polled::Messages(m)) => m,
                Ok(Polled::Closed) => break,
                Err(e) if e.kind() == ErrorKind::InvalidData => {
                    log::warn!("client {}: {e}", client.peer);
                    let _ = client.send(&Message::Control(ControlMessage::Error {
                        message: e.to_string(),
                    }));
                    client.close();
                    break;
                }
                Err(e) => {
                    log::warn!("client {}: {e}", client.peer);
                    break;
                }
            };
            let bye = msgs
                .iter()
                .any(|m| matches!(m, Message::Control(ControlMessage::Bye)));
            let latest = msgs.into_iter().rev().find_map(|m| match m {
                Message::Camera(c) => Some(c),
                _ => None,
            });
            let Some(update) = latest else {
                if bye {
                    break;
                }
                continue;
            };

            let frame_start = Instant::now();
            let (w, h) = (update.width, update.height);
            let cam = update.camera();
            self.ep.broadcast(Some(encode_command(&cam, w, h)))?;
            let out = match render_frame(self.ep, self.scene, &cam, w, h, &self.opts.render) {
                Ok(out) => out,
                Err(e) => {
                    log::warn!("frame failed: {e}");
                    let _ = client.send(&Message::Control(ControlMessage::Error {
                        message: e.to_string(),
                    }));
                    client.close();
                    if let EngineError::Transport(_) = e {
                        return Err(e.into());
                    }
                    break;
                }
            };
            let render_millis = frame_start.elapsed().as_millis() as u32;
            sequence += 1;
            self.report.frames += 1;
            let image = out.image.expect("root assembles the image").to_rgb8();
            if let Some(log) = &mut self.stats {
                for r in &out.stats.rounds {
                    writeln!(log, "{}", r.to_line(sequence as u64, 0))?;
                }
                log.flush()?;
            }
            let sent = client.send(&Message::Frame(FrameMessage {
                width: image.width,
                height: image.height,
                format: PixelFormat::Rgb8,
                sequence,
                render_millis,
                pixels: image.data,
            }));
            if let Err(e) = sent {
                log::info!("client {} went away: {e}", client.peer);
                break;
            }
            let secs = started.elapsed().as_secs_f64();
            log::info!(
                "frame {sequence}: {render_millis} ms, {:.1} fps over the session",
                sequence as f64 / secs.max(1e-9)
            );
            if bye {
                break;
            }
            let min = Duration::from_millis(self.opts.min_frame_millis);
            let spent = frame_start.elapsed();
            if spent < min {
                thread::sleep(min - spent);
            }
        }
        log::info!("session with {} ended after {sequence} frames", client.peer);
        Ok(SessionEnd::Client)
    }
}

fn open_stats(path: &Option<PathBuf>) -> io::Result<Option<BufWriter<File>>> {
    path.as_ref()
        .map(|p| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
        })
        .transpose()
}

/// Accepts connections until `stop` is raised. The first client becomes the session,
/// anyone arriving while it is active is sent `busy` and dropped.
fn acceptor(
    listener: TcpListener,
    sessions: Sender<Client>,
    busy: Arc<AtomicBool>,
    stop: Arc<AtomicBool>,
) -> io::Result<usize> {
    listener.set_nonblocking(true)?;
    let mut refused = 0;
    while !stop.load(Ordering::SeqCst) {
        let stream = match listener.accept() {
            Ok((s, _)) => s,
            Err(e) if would_block(&e) => {
                thread::sleep(ACCEPT_POLL);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut client = match Client::accept(stream) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("rejected connection: {e}");
                continue;
            }
        };
        if busy.swap(true, Ordering::SeqCst) {
            refused += 1;
            log::info!("refusing {}: a session is active", client.peer);
            let _ = client.send(&Message::Control(ControlMessage::Busy));
            client.close();
            continue;
        }
        log::info!(
            "session from {} ({})",
            client.peer,
            if client.is_websocket() {
                "websocket"
            } else {
                "tcp"
            }
        );
        if sessions.send(client).is_err() {
            break;
        }
    }
    Ok(refused)
}

/// Rank 0 side of the service. Returns after `stop` is raised or the session limit is
/// reached, having told every worker to stop.
pub fn serve_root(
    listener: TcpListener,
    ep: &mut RankEndpoint,
    scene: &RankScene,
    opts: &ServeOptions,
    stop: Arc<AtomicBool>,
) -> Result<ServeReport, ServeError> {
    assert!(ep.is_root(), "serve_root runs on rank 0");
    let busy = Arc::new(AtomicBool::new(false));
    let (tx, rx): (Sender<Client>, Receiver<Client>) = bounded(1);
    let accept_thread = {
        let (busy, stop) = (busy.clone(), stop.clone());
        thread::spawn(move || acceptor(listener, tx, busy, stop))
    };
    let mut root = Root {
        ep,
        scene,
        opts,
        stats: open_stats(&opts.stats_log)?,
        report: ServeReport::default(),
    };
    let result = loop {
        if stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        if opts.max_sessions.is_some_and(|m| root.report.sessions >= m) {
            break Ok(());
        }
        let client = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(c) => c,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break Ok(()),
        };
        let end = root.session(client, &stop);
        root.report.sessions += 1;
        busy.store(false, Ordering::SeqCst);
        match end {
            Ok(SessionEnd::Client) => {}
            Ok(SessionEnd::Stopped) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    stop.store(true, Ordering::SeqCst);
    let mut report = root.report;
    // a broken transport leaves nobody to tell
    if result.is_ok() {
        root.ep.broadcast(Some(vec![CMD_STOP]))?;
    }
    match accept_thread.join().expect("acceptor thread") {
        Ok(refused) => report.refused = refused,
        Err(e) => log::warn!("acceptor failed: {e}"),
    }
    result.map(|()| report)
}

/// A service running on background threads, all ranks in this process.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Result<ServeReport, ServeError>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    /// Waits for the service to finish on its own.
    pub fn join(self) -> Result<ServeReport, ServeError> {
        self.thread.join().expect("service thread panicked")
    }

    pub fn shutdown(self) -> Result<ServeReport, ServeError> {
        self.stop();
        self.join()
    }
}

/// Partitions `scene` over `ranks` endpoints and serves on `listener` in the background.
pub fn spawn_service(
    listener: TcpListener,
    scene: &SceneDesc,
    ranks: usize,
    backend: Backend,
    strategy: PartitionStrategy,
    config: &TransportConfig,
    opts: ServeOptions,
) -> Result<ServiceHandle, ServeError> {
    let addr = listener.local_addr()?;
    let partition = partition_scene(scene, ranks, strategy).map_err(EngineError::from)?;
    let scenes = RankScene::split(scene, &partition);
    let endpoints = init_ranks(ranks, backend, config)?;
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let stop = stop.clone();
        thread::spawn(move || {
            let mut eps = endpoints.into_iter();
            let mut root_ep = eps.next().expect("at least one rank");
            let mut scenes = scenes.into_iter();
            let root_scene = scenes.next().expect("one scene per rank");
            let workers: Vec<_> = eps
                .zip(scenes)
                .map(|(mut ep, rs)| {
                    let render = opts.render.clone();
                    thread::spawn(move || run_worker(&mut ep, &rs, &render))
                })
                .collect();
            let result = serve_root(listener, &mut root_ep, &root_scene, &opts, stop);
            drop(root_ep);
            for w in workers {
                match w.join().expect("worker thread panicked") {
                    Ok(_) => {}
                    Err(e) if result.is_ok() => return Err(e),
                    Err(e) => log::debug!("worker: {e}"),
                }
            }
            result
        })
    };
    Ok(ServiceHandle { addr, stop, thread })
}
