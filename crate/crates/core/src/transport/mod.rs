//! One-sided, client-initiated memory transport.
//!
//! Servers register [`Region`]s in their own [`ServerMemory`]; clients write
//! and read those regions through a [`Connection`]. The server application
//! never sends anything: it only reads and writes its local memory. Two
//! backends implement the same contract: [`inproc`] (regions are shared
//! buffers, used for deterministic tests and the harness) and [`tcp`] (a
//! per-server agent applies framed writes to local memory).
//!
//! Ordering: writes issued on one connection become visible in issue order.
//! There is no ordering across connections.

pub mod frame;
pub mod handshake;
pub mod inproc;
pub mod tcp;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, TryRecvError};
use parking_lot::RwLock;

use crate::{ClientId, Error, Result, ServerId};

pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionDescriptor {
    pub region_id: u32,
    /// Worker id of the owner (a server id for slot regions).
    pub owner: u32,
    pub length: u64,
}

/// A registered, zero-initialised memory region.
#[derive(Debug)]
pub struct Region {
    desc: RegionDescriptor,
    data: RwLock<Vec<u8>>,
}

fn bounds(offset: u64, len: usize, length: u64) -> Result<std::ops::Range<usize>> {
    let end = offset.checked_add(len as u64);
    match end {
        Some(end) if end <= length => Ok(offset as usize..end as usize),
        _ => Err(Error::protocol(format!(
            "access [{offset}, +{len}) outside region of {length} bytes"
        ))),
    }
}

impl Region {
    pub fn new(desc: RegionDescriptor) -> Self {
        Region {
            desc,
            data: RwLock::new(vec![0; desc.length as usize]),
        }
    }

    pub fn descriptor(&self) -> RegionDescriptor {
        self.desc
    }

    pub fn len(&self) -> usize {
        self.desc.length as usize
    }

    pub fn is_empty(&self) -> bool {
        self.desc.length == 0
    }

    pub fn read_local(&self, offset: usize, len: usize) -> Result<Vec<u8>> {
        let r = bounds(offset as u64, len, self.desc.length)?;
        Ok(self.data.read()[r].to_vec())
    }

    pub fn write_local(&self, offset: usize, bytes: &[u8]) -> Result<()> {
        let r = bounds(offset as u64, bytes.len(), self.desc.length)?;
        self.data.write()[r].copy_from_slice(bytes);
        Ok(())
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.data.read())
    }
}

/// All regions a server has registered.
#[derive(Debug)]
pub struct ServerMemory {
    owner: ServerId,
    regions: RwLock<BTreeMap<u32, Arc<Region>>>,
    next_id: AtomicU32,
}

impl ServerMemory {
    pub fn new(owner: ServerId) -> Self {
        ServerMemory {
            owner,
            regions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU32::new(1),
        }
    }

    pub fn owner(&self) -> ServerId {
        self.owner
    }

    /// Registers a fresh zeroed region. Ids are never reused.
    pub fn register(&self, length: usize) -> Arc<Region> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let region = Arc::new(Region::new(RegionDescriptor {
            region_id: id,
            owner: self.owner.0,
            length: length as u64,
        }));
        self.regions.write().insert(id, region.clone());
        region
    }

    pub fn deregister(&self, region_id: u32) -> Option<Arc<Region>> {
        self.regions.write().remove(&region_id)
    }

    pub fn get(&self, region_id: u32) -> Option<Arc<Region>> {
        self.regions.read().get(&region_id).cloned()
    }

    pub fn region_ids(&self) -> Vec<u32> {
        self.regions.read().keys().copied().collect()
    }

    fn region(&self, region_id: u32) -> Result<Arc<Region>> {
        self.get(region_id)
            .ok_or_else(|| Error::protocol(format!("unknown region {region_id}")))
    }

    pub fn write(&self, region_id: u32, offset: u64, bytes: &[u8]) -> Result<()> {
        let region = self.region(region_id)?;
        let r = bounds(offset, bytes.len(), region.desc.length)?;
        region.write_local(r.start, bytes)
    }

    pub fn read(&self, region_id: u32, offset: u64, len: usize) -> Result<Vec<u8>> {
        let region = self.region(region_id)?;
        let r = bounds(offset, len, region.desc.length)?;
        region.read_local(r.start, len)
    }
}

/// Server callback that allocates the client's slot regions during the
/// descriptor exchange. Re-handshakes must release the client's old regions.
pub trait HandshakeHandler: Send + Sync {
    fn accept(&self, client: ClientId, client_regions: &[RegionDescriptor])
        -> Result<Vec<RegionDescriptor>>;
}

#[derive(Debug, Default)]
pub struct NodeStats {
    pub writes_applied: AtomicU64,
    pub writes_rejected: AtomicU64,
    pub reads_served: AtomicU64,
    pub handshakes: AtomicU64,
    /// Frames or calls originated by the server side that were not replies
    /// to a client operation. Must stay zero.
    pub server_initiated_sends: AtomicU64,
}

/// The transport-facing half of a server: its memory, handshake callback
/// and liveness.
pub struct ServerNode {
    pub id: ServerId,
    pub memory: Arc<ServerMemory>,
    handler: Arc<dyn HandshakeHandler>,
    alive: AtomicBool,
    pub stats: NodeStats,
}

impl ServerNode {
    pub fn new(memory: Arc<ServerMemory>, handler: Arc<dyn HandshakeHandler>) -> Arc<Self> {
        Arc::new(ServerNode {
            id: memory.owner(),
            memory,
            handler,
            alive: AtomicBool::new(true),
            stats: NodeStats::default(),
        })
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    /// Crash the node: all later transport operations against it fail.
    pub fn kill(&self) {
        self.alive.store(false, Ordering::Release);
    }

    pub(crate) fn apply_write(&self, region_id: u32, offset: u64, bytes: &[u8]) -> Result<()> {
        let r = self.memory.write(region_id, offset, bytes);
        match r {
            Ok(()) => self.stats.writes_applied.fetch_add(1, Ordering::Relaxed),
            Err(_) => self.stats.writes_rejected.fetch_add(1, Ordering::Relaxed),
        };
        r
    }

    pub(crate) fn serve_read(&self, region_id: u32, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.stats.reads_served.fetch_add(1, Ordering::Relaxed);
        self.memory.read(region_id, offset, len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Init,
    HandlerExchanged,
    Ready,
    Closed,
}

/// Completion of a one-sided write. Callers may block with [`wait`] or check
/// with [`is_complete`].
///
/// [`wait`]: Completion::wait
/// [`is_complete`]: Completion::is_complete
pub struct Completion {
    state: CompletionState,
    server: ServerId,
}

enum CompletionState {
    Resolved(Option<Result<()>>),
    Waiting(Receiver<Result<Vec<u8>>>),
}

impl Completion {
    pub(crate) fn resolved(server: ServerId, r: Result<()>) -> Self {
        Completion {
            state: CompletionState::Resolved(Some(r)),
            server,
        }
    }

    pub(crate) fn waiting(server: ServerId, rx: Receiver<Result<Vec<u8>>>) -> Self {
        Completion {
            state: CompletionState::Waiting(rx),
            server,
        }
    }

    pub fn is_complete(&mut self) -> bool {
        match &self.state {
            CompletionState::Resolved(_) => true,
            CompletionState::Waiting(rx) => match rx.try_recv() {
                Ok(r) => {
                    self.state = CompletionState::Resolved(Some(r.map(|_| ())));
                    true
                }
                Err(TryRecvError::Empty) => false,
                Err(TryRecvError::Disconnected) => {
                    self.state =
                        CompletionState::Resolved(Some(Err(Error::TransportFailure(self.server))));
                    true
                }
            },
        }
    }

    pub fn wait(self) -> Result<()> {
        self.wait_timeout(Duration::from_secs(30))
    }

    pub fn wait_timeout(self, timeout: Duration) -> Result<()> {
        match self.state {
            CompletionState::Resolved(r) => r.unwrap_or(Ok(())),
            CompletionState::Waiting(rx) => match rx.recv_timeout(timeout) {
                Ok(r) => r.map(|_| ()),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    Err(Error::TransportFailure(self.server))
                }
            },
        }
    }
}

/// Client end of an established connection.
pub trait Connection: Send {
    fn client(&self) -> ClientId;
    fn server(&self) -> ServerId;
    fn state(&self) -> ConnState;
    /// Slot regions the server registered for this client.
    fn remote_regions(&self) -> &[RegionDescriptor];
    /// The client's own staging region as announced to the server.
    fn local_region(&self) -> RegionDescriptor;
    fn write(&mut self, region_id: u32, offset: u64, bytes: &[u8]) -> Result<Completion>;
    fn read(&mut self, region_id: u32, offset: u64, len: usize) -> Result<Vec<u8>>;
    fn close(&mut self);
}

/// Something that can connect a client to a server.
pub trait Fabric: Send + Sync {
    fn establish(&self, client: ClientId, server: ServerId) -> Result<Box<dyn Connection>>;
}

pub(crate) fn check_ready(state: ConnState, client: ClientId, server: ServerId) -> Result<()> {
    if state != ConnState::Ready {
        return Err(Error::Connection {
            client,
            server,
            reason: format!("connection is {state:?}"),
        });
    }
    Ok(())
}

pub(crate) fn check_remote_bounds(
    regions: &[RegionDescriptor],
    region_id: u32,
    offset: u64,
    len: usize,
) -> Result<()> {
    let desc = regions
        .iter()
        .find(|r| r.region_id == region_id)
        .ok_or_else(|| Error::protocol(format!("region {region_id} not known to connection")))?;
    bounds(offset, len, desc.length).map(|_| ())
}

static CLIENT_REGION_IDS: AtomicU32 = AtomicU32::new(1);

/// Descriptor for a client-side staging buffer of `length` bytes.
pub(crate) fn client_staging_region(client: ClientId, length: u64) -> RegionDescriptor {
    RegionDescriptor {
        region_id: CLIENT_REGION_IDS.fetch_add(1, Ordering::Relaxed),
        owner: client.0,
        length,
    }
}
