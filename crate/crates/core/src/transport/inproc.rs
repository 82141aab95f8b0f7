//! In-process backend: connections operate directly on the server's memory.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::RwLock;

use super::handshake::{client_handshake, ServerSession};
use super::{
    check_ready, check_remote_bounds, client_staging_region, Completion, ConnState, Connection,
    Fabric, RegionDescriptor, ServerNode,
};
use crate::{ClientId, Error, Result, ServerId};

#[derive(Default)]
pub struct InProcFabric {
    nodes: RwLock<BTreeMap<ServerId, Arc<ServerNode>>>,
}

impl InProcFabric {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Makes a node reachable, replacing any previous node with that id.
    pub fn add_node(&self, node: Arc<ServerNode>) {
        self.nodes.write().insert(node.id, node);
    }

    pub fn remove_node(&self, id: ServerId) -> Option<Arc<ServerNode>> {
        self.nodes.write().remove(&id)
    }

    pub fn node(&self, id: ServerId) -> Option<Arc<ServerNode>> {
        self.nodes.read().get(&id).cloned()
    }
}

impl Fabric for InProcFabric {
    fn establish(&self, client: ClientId, server: ServerId) -> Result<Box<dyn Connection>> {
        let timeout = || Error::Connection {
            client,
            server,
            reason: "handshake timed out".into(),
        };
        let node = self.node(server).ok_or_else(timeout)?;
        let staging = client_staging_region(client, 0);
        let mut session = ServerSession::new(server, server.0 as u64);
        let handler_id = ((client.0 as u64) << 32) | server.0 as u64;
        let regions = client_handshake(client, server, handler_id, staging, &mut |msg| {
            if !node.is_alive() {
                return Err(timeout());
            }
            Ok(session.step(msg, node.handler.as_ref()))
        })?;
        node.stats.handshakes.fetch_add(1, Ordering::Relaxed);
        Ok(Box::new(InProcConnection {
            client,
            node,
            state: ConnState::Ready,
            regions,
            staging,
        }))
    }
}

pub struct InProcConnection {
    client: ClientId,
    node: Arc<ServerNode>,
    state: ConnState,
    regions: Vec<RegionDescriptor>,
    staging: RegionDescriptor,
}

impl InProcConnection {
    fn precheck(&self, region_id: u32, offset: u64, len: usize) -> Result<()> {
        check_ready(self.state, self.client, self.node.id)?;
        check_remote_bounds(&self.regions, region_id, offset, len)
    }
}

impl Connection for InProcConnection {
    fn client(&self) -> ClientId {
        self.client
    }

    fn server(&self) -> ServerId {
        self.node.id
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
        let server = self.node.id;
        if !self.node.is_alive() {
            return Ok(Completion::resolved(server, Err(Error::TransportFailure(server))));
        }
        let r = self.node.apply_write(region_id, offset, bytes);
        // A deregistered region means the server dropped this client.
        Ok(Completion::resolved(
            server,
            r.map_err(|_| Error::TransportFailure(server)),
        ))
    }

    fn read(&mut self, region_id: u32, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.precheck(region_id, offset, len)?;
        if !self.node.is_alive() {
            return Err(Error::TransportFailure(self.node.id));
        }
        self.node
            .serve_read(region_id, offset, len)
            .map_err(|_| Error::TransportFailure(self.node.id))
    }

    fn close(&mut self) {
        self.state = ConnState::Closed;
    }
}
