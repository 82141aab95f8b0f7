//! Networked backend over TCP.
//!
//! Each server runs a [`TcpAgent`] that accepts client connections and
//! applies incoming write frames to the server's local memory, answers read
//! requests, and steps the handshake. The server application itself never
//! sees a frame.
//!
//! Write completions are fenced: after each write frame the client sends a
//! zero-length read on the same connection. Frames on one connection are
//! applied in order, so the fence's response proves the write is visible.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, Sender};
use parking_lot::{Mutex, RwLock};

use super::frame::{read_frame, write_frame, Frame, Opcode, READ_ERROR_OFFSET};
use super::handshake::{client_handshake, HandshakeMsg, ServerSession};
use super::{
    check_ready, check_remote_bounds, client_staging_region, Completion, ConnState, Connection,
    Fabric, RegionDescriptor, ServerNode, DEFAULT_HANDSHAKE_TIMEOUT,
};
use crate::{ClientId, Error, Result, ServerId};

const ACCEPT_POLL: Duration = Duration::from_millis(2);

pub struct TcpAgent {
    addr: SocketAddr,
    node: Arc<ServerNode>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpAgent {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts accepting.
    pub fn spawn(node: Arc<ServerNode>, addr: &str) -> Result<TcpAgent> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let streams: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let acceptor = {
            let (node, stop, streams) = (node.clone(), stop.clone(), streams.clone());
            thread::Builder::new()
                .name(format!("agent-{}", node.id.0))
                .spawn(move || accept_loop(listener, node, stop, streams))?
        };
        Ok(TcpAgent {
            addr: local,
            node,
            stop,
            streams,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node(&self) -> &Arc<ServerNode> {
        &self.node
    }

    /// Crash the agent: close the listener and every connection.
    pub fn kill(&mut self) {
        self.node.kill();
        self.stop.store(true, Ordering::Release);
        for s in self.streams.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpAgent {
    fn drop(&mut self) {
        self.kill();
    }
}

fn accept_loop(
    listener: TcpListener,
    node: Arc<ServerNode>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    streams.lock().push(clone);
                }
                let node = node.clone();
                let _ = thread::Builder::new()
                    .name(format!("agent-{}-conn", node.id.0))
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, &node) {
                            log::debug!("agent {} connection ended: {e}", node.id);
                        }
                    });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("agent {} accept failed: {e}", node.id);
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn serve_connection(stream: TcpStream, node: &ServerNode) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = ServerSession::new(node.id, node.id.0 as u64);
    loop {
        let frame = read_frame(&mut reader)?;
        if !node.is_alive() {
            return Ok(());
        }
        match frame.opcode {
            Opcode::Write => {
                let _ = node.apply_write(frame.region_id, frame.offset, &frame.payload);
            }
            Opcode::ReadReq => {
                let len = frame
                    .payload
                    .get(..4)
                    .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                    .unwrap_or(0);
                let reply = match node.serve_read(frame.region_id, frame.offset, len) {
                    Ok(bytes) => Frame {
                        opcode: Opcode::ReadResp,
                        region_id: frame.region_id,
                        offset: frame.offset,
                        payload: bytes,
                    },
                    Err(_) => Frame {
                        opcode: Opcode::ReadResp,
                        region_id: frame.region_id,
                        offset: READ_ERROR_OFFSET,
                        payload: Vec::new(),
                    },
                };
                write_frame(&mut writer, &reply)?;
            }
            Opcode::Handshake => {
                let reply = match HandshakeMsg::decode(&frame.payload) {
                    Ok(msg) => session.step(msg, node.handler.as_ref()),
                    Err(e) => HandshakeMsg::Error(e.to_string()),
                };
                if session.state() == ConnState::Ready {
                    node.stats.handshakes.fetch_add(1, Ordering::Relaxed);
                }
                write_frame(&mut writer, &Frame::handshake(reply.encode()))?;
            }
            Opcode::ReadResp => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "client sent a read response",
                ))
            }
        }
        // Flush only when no further request is already buffered.
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
    }
}

/// Directory of agent addresses.
pub struct TcpFabric {
    addrs: RwLock<BTreeMap<ServerId, SocketAddr>>,
    handshake_timeout: Duration,
    op_timeout: Duration,
}

impl TcpFabric {
    pub fn new() -> Arc<Self> {
        Self::with_timeouts(DEFAULT_HANDSHAKE_TIMEOUT, Duration::from_secs(5))
    }

    pub fn with_timeouts(handshake_timeout: Duration, op_timeout: Duration) -> Arc<Self> {
        Arc::new(TcpFabric {
            addrs: RwLock::new(BTreeMap::new()),
            handshake_timeout,
            op_timeout,
        })
    }

    pub fn register(&self, server: ServerId, addr: SocketAddr) {
        self.addrs.write().insert(server, addr);
    }

    pub fn unregister(&self, server: ServerId) {
        self.addrs.write().remove(&server);
    }
}

type Waiters = Arc<Mutex<VecDeque<Sender<Result<Vec<u8>>>>>>;

impl Fabric for TcpFabric {
    fn establish(&self, client: ClientId, server: ServerId) -> Result<Box<dyn Connection>> {
        let conn_err = |reason: String| Error::Connection {
            client,
            server,
            reason,
        };
        let addr = self
            .addrs
            .read()
            .get(&server)
            .copied()
            .ok_or_else(|| conn_err("server not registered".into()))?;
        let stream = TcpStream::connect_timeout(&addr, self.handshake_timeout)
            .map_err(|e| conn_err(format!("connect: {e}")))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.handshake_timeout))?;
        let mut hs_reader = BufReader::new(stream.try_clone()?);
        let mut hs_writer = stream.try_clone()?;

        let staging = client_staging_region(client, 0);
        let handler_id = ((client.0 as u64) << 32) | server.0 as u64;
        let regions = client_handshake(client, server, handler_id, staging, &mut |msg| {
            write_frame(&mut hs_writer, &Frame::handshake(msg.encode()))
                .map_err(|e| conn_err(format!("handshake send: {e}")))?;
            let frame = read_frame(&mut hs_reader).map_err(|e| match e.kind() {
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
                    conn_err("handshake timed out".into())
                }
                _ => conn_err(format!("handshake receive: {e}")),
            })?;
            if frame.opcode != Opcode::Handshake {
                return Err(conn_err("unexpected frame during handshake".into()));
            }
            match HandshakeMsg::decode(&frame.payload)? {
                HandshakeMsg::Error(msg) => Err(conn_err(msg)),
                other => Ok(other),
            }
        })?;
        stream.set_read_timeout(None)?;

        let waiters: Waiters = Arc::default();
        let broken = Arc::new(AtomicBool::new(false));
        let reader = {
            let (waiters, broken) = (waiters.clone(), broken.clone());
            // The handshake reader holds nothing beyond the last reply.
            let mut r = hs_reader;
            thread::Builder::new()
                .name(format!("conn-{}-{}", client.0, server.0))
                .spawn(move || {
                    loop {
                        match read_frame(&mut r) {
                            Ok(f) if f.opcode == Opcode::ReadResp => {
                                let waiter = waiters.lock().pop_front();
                                if let Some(tx) = waiter {
                                    let r = if f.offset == READ_ERROR_OFFSET {
                                        Err(Error::TransportFailure(server))
                                    } else {
                                        Ok(f.payload)
                                    };
                                    let _ = tx.send(r);
                                }
                            }
                            _ => break,
                        }
                    }
                    broken.store(true, Ordering::Release);
                    for tx in waiters.lock().drain(..) {
                        let _ = tx.send(Err(Error::TransportFailure(server)));
                    }
                })?
        };
        Ok(Box::new(TcpConnection {
            client,
            server,
            stream,
            state: ConnState::Ready,
            regions,
            staging,
            waiters,
            broken,
            reader: Some(reader),
            op_timeout: self.op_timeout,
            scratch: Vec::new(),
        }))
    }
}

pub struct TcpConnection {
    client: ClientId,
    server: ServerId,
    stream: TcpStream,
    state: ConnState,
    regions: Vec<RegionDescriptor>,
    staging: RegionDescriptor,
    waiters: Waiters,
    broken: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
    op_timeout: Duration,
    scratch: Vec<u8>,
}

impl TcpConnection {
    fn precheck(&self, region_id: u32, offset: u64, len: usize) -> Result<()> {
        check_ready(self.state, self.client, self.server)?;
        check_remote_bounds(&self.regions, region_id, offset, len)
    }

    /// Queues a waiter for the next read response and sends `frames`.
    fn send_expecting_reply(&mut self, frames: &[Frame]) -> crossbeam_channel::Receiver<Result<Vec<u8>>> {
        let (tx, rx) = bounded(1);
        if self.broken.load(Ordering::Acquire) {
            let _ = tx.send(Err(Error::TransportFailure(self.server)));
            return rx;
        }
        self.waiters.lock().push_back(tx);
        self.scratch.clear();
        for f in frames {
            f.encode_into(&mut self.scratch);
        }
        if self.stream.write_all(&self.scratch).is_err() {
            self.broken.store(true, Ordering::Release);
            let _ = self.stream.shutdown(Shutdown::Both);
        }
        rx
    }
}

impl Connection for TcpConnection {
    fn client(&self) -> ClientId {
        self.client
    }

    fn server(&self) -> ServerId {
        self.server
    }

    fn state(&self) -> ConnState {
        self.state
    }

    fn remote_regions(&self) -> &[RegionDescriptor] {
        &self.regions
    }

    fn local_region(&self) -> RegionDescriptor {
        self.staging
    }

    fn write(&mut self, region_id: u32, offset: u64, bytes: &[u8]) -> Result<Completion> {
        self.precheck(region_id, offset, bytes.len())?;
        let rx = self.send_expecting_reply(&[
            Frame::write(region_id, offset, bytes),
            Frame::read_req(region_id, 0, 0),
        ]);
        Ok(Completion::waiting(self.server, rx))
    }

    fn read(&mut self, region_id: u32, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.precheck(region_id, offset, len)?;
        let rx = self.send_expecting_reply(&[Frame::read_req(region_id, offset, len as u32)]);
        match rx.recv_timeout(self.op_timeout) {
            Ok(r) => r,
            Err(_) => Err(Error::TransportFailure(self.server)),
        }
    }

    fn close(&mut self) {
        self.state = ConnState::Closed;
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpConnection {
    fn drop(&mut self) {
        self.close();
    }
}
