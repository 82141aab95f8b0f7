//! The monitor over TCP, using the transport's control frames.
//!
//! Frame payloads are tagged records: `1` register and `2` heartbeat carry a
//! `u32` worker subject and are answered by `5` ack (`u8` ok, then an error
//! message when not ok); `3` subscribe turns the connection into a stream of
//! `4` event records.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::unbounded;
use parking_lot::Mutex;

use super::{ClusterEvent, ControlPlane, MonitorHandle, Subscription, WorkerId};
use crate::transport::frame::{read_frame, write_frame, Frame, Opcode};
use crate::{Error, Result};

const TAG_REGISTER: u8 = 1;
const TAG_HEARTBEAT: u8 = 2;
const TAG_SUBSCRIBE: u8 = 3;
const TAG_EVENT: u8 = 4;
const TAG_ACK: u8 = 5;

fn control(tag: u8, body: &[u8]) -> Frame {
    let mut record = vec![tag];
    record.extend_from_slice(body);
    Frame::handshake(record)
}

/// Serves a [`MonitorHandle`] on a TCP listener.
pub struct MonitorEndpoint {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl MonitorEndpoint {
    pub fn spawn(monitor: MonitorHandle, bind: &str) -> Result<Self> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let acceptor = std::thread::Builder::new()
            .name("monitor-accept".into())
            .spawn(move || {
                while !flag.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let m = monitor.clone();
                            let f = flag.clone();
                            std::thread::spawn(move || serve(m, stream, f));
                        }
                        Err(_) => std::thread::sleep(Duration::from_millis(2)),
                    }
                }
            })?;
        Ok(MonitorEndpoint {
            addr,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for MonitorEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

fn serve(monitor: MonitorHandle, stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    while let Ok(frame) = read_frame(&mut reader) {
        if frame.opcode != Opcode::Handshake || frame.payload.is_empty() {
            break;
        }
        let subject = || {
            frame
                .payload
                .get(1..5)
                .map(|b| WorkerId::from_wire(u32::from_le_bytes(b.try_into().unwrap())))
                .ok_or_else(|| Error::protocol("control record missing subject"))
        };
        let result = match frame.payload[0] {
            TAG_REGISTER => subject().and_then(|w| monitor.register(w)),
            TAG_HEARTBEAT => subject().and_then(|w| monitor.heartbeat(w)),
            TAG_SUBSCRIBE => {
                stream_events(&monitor, &mut writer, &stop);
                return;
            }
            _ => break,
        };
        let ack = match result {
            Ok(()) => control(TAG_ACK, &[1]),
            Err(e) => {
                let mut body = vec![0];
                body.extend_from_slice(e.to_string().as_bytes());
                control(TAG_ACK, &body)
            }
        };
        if write_frame(&mut writer, &ack).and_then(|_| writer.flush()).is_err() {
            break;
        }
    }
}

fn stream_events(monitor: &MonitorHandle, writer: &mut BufWriter<TcpStream>, stop: &AtomicBool) {
    let Ok(mut sub) = monitor.subscribe() else {
        return;
    };
    while !stop.load(Ordering::Acquire) {
        match sub.next_timeout(Duration::from_millis(20)) {
            Ok(Some(ev)) => {
                if write_frame(writer, &control(TAG_EVENT, &ev.encode()))
                    .and_then(|_| writer.flush())
                    .is_err()
                {
                    return;
                }
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
    let _ = writer.get_ref().shutdown(Shutdown::Both);
}

/// Client side of [`MonitorEndpoint`].
pub struct RemoteMonitor {
    addr: SocketAddr,
    timeout: Duration,
    conn: Mutex<Option<(BufReader<TcpStream>, TcpStream)>>,
}

impl RemoteMonitor {
    pub fn new(addr: SocketAddr) -> Self {
        RemoteMonitor {
            addr,
            timeout: Duration::from_millis(500),
            conn: Mutex::new(None),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(|_| Error::MonitorDown)?;
        s.set_nodelay(true)?;
        Ok(s)
    }

    fn request(&self, tag: u8, worker: WorkerId) -> Result<()> {
        let mut guard = self.conn.lock();
        if guard.is_none() {
            let s = self.connect()?;
            s.set_read_timeout(Some(self.timeout))?;
            *guard = Some((BufReader::new(s.try_clone()?), s));
        }
        let (reader, writer) = guard.as_mut().unwrap();
        let frame = control(tag, &worker.to_wire().to_le_bytes());
        let reply = write_frame(writer, &frame).and_then(|_| read_frame(reader));
        match reply {
            Ok(f) if f.payload.first() == Some(&TAG_ACK) => match f.payload.get(1) {
                Some(1) => Ok(()),
                _ => {
                    log::debug!("monitor refused: {}", String::from_utf8_lossy(&f.payload[2..]));
                    Err(Error::Registration(worker.to_string()))
                }
            },
            _ => {
                *guard = None;
                Err(Error::MonitorDown)
            }
        }
    }
}

impl ControlPlane for RemoteMonitor {
    fn register(&self, worker: WorkerId) -> Result<()> {
        self.request(TAG_REGISTER, worker)
    }

    fn heartbeat(&self, worker: WorkerId) -> Result<()> {
        self.request(TAG_HEARTBEAT, worker)
    }

    fn subscribe(&self) -> Result<Subscription> {
        let mut stream = self.connect()?;
        write_frame(&mut stream, &control(TAG_SUBSCRIBE, &[]))?;
        let (tx, rx) = unbounded();
        let mut reader = BufReader::new(stream);
        std::thread::Builder::new()
            .name("monitor-sub".into())
            .spawn(move || {
                while let Ok(frame) = read_frame(&mut reader) {
                    if frame.payload.first() != Some(&TAG_EVENT) {
                        break;
                    }
                    let Ok(ev) = ClusterEvent::decode(&frame.payload[1..]) else {
                        break;
                    };
                    if tx.send(ev).is_err() {
                        break;
                    }
                }
            })?;
        Ok(Subscription::new(rx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{EventBody, Monitor, MonitorConfig};
    use crate::ServerId;

    #[test]
    fn register_heartbeat_and_stream_over_tcp() {
        let monitor = Monitor::start(MonitorConfig::default());
        let endpoint = MonitorEndpoint::spawn(monitor.handle(), "127.0.0.1:0").unwrap();
        let remote = RemoteMonitor::new(endpoint.addr());
        let mut sub = remote.subscribe().unwrap();
        let w = WorkerId::server(ServerId(3));
        assert!(matches!(remote.heartbeat(w), Err(Error::Registration(_))));
        remote.register(w).unwrap();
        remote.heartbeat(w).unwrap();
        let ev = sub.next_timeout(Duration::from_secs(2)).unwrap().unwrap();
        assert_eq!(ev.body, EventBody::WorkerOnline(w));
    }
}
