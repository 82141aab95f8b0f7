//! Cluster events and their wire record:
//! `[u64 seq][u8 kind][u32 subject][optional placement blob]`, little-endian.
//!
//! Kinds: 1 online, 2 offline, 3 placement update (subject 0, blob follows).
//! Subjects carry the worker kind in the top bit: clear for servers, set
//! for clients.

use std::fmt;

use crate::placement::PlacementTable;
use crate::{ClientId, Error, Result, ServerId};

const CLIENT_BIT: u32 = 0x8000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WorkerId {
    Server(ServerId),
    Client(ClientId),
}

impl WorkerId {
    pub fn server(id: ServerId) -> Self {
        WorkerId::Server(id)
    }

    pub fn client(id: ClientId) -> Self {
        WorkerId::Client(id)
    }

    pub fn to_wire(self) -> u32 {
        match self {
            WorkerId::Server(s) => s.0 & !CLIENT_BIT,
            WorkerId::Client(c) => c.0 | CLIENT_BIT,
        }
    }

    pub fn from_wire(v: u32) -> Self {
        if v & CLIENT_BIT != 0 {
            WorkerId::Client(ClientId(v & !CLIENT_BIT))
        } else {
            WorkerId::Server(ServerId(v))
        }
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerId::Server(s) => s.fmt(f),
            WorkerId::Client(c) => c.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    WorkerOnline(WorkerId),
    WorkerOffline(WorkerId),
    Placement(PlacementTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEvent {
    pub seq: u64,
    pub body: EventBody,
}

impl ClusterEvent {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.seq.to_le_bytes().to_vec();
        match &self.body {
            EventBody::WorkerOnline(w) => {
                out.push(1);
                out.extend_from_slice(&w.to_wire().to_le_bytes());
            }
            EventBody::WorkerOffline(w) => {
                out.push(2);
                out.extend_from_slice(&w.to_wire().to_le_bytes());
            }
            EventBody::Placement(table) => {
                out.push(3);
                out.extend_from_slice(&0u32.to_le_bytes());
                out.extend_from_slice(&table.to_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(Error::protocol(format!(
                "event record of {} bytes is shorter than 13",
                bytes.len()
            )));
        }
        let seq = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let subject = WorkerId::from_wire(u32::from_le_bytes(bytes[9..13].try_into().unwrap()));
        let body = match bytes[8] {
            1 => EventBody::WorkerOnline(subject),
            2 => EventBody::WorkerOffline(subject),
            3 => EventBody::Placement(PlacementTable::from_bytes(&bytes[13..])?),
            k => return Err(Error::protocol(format!("unknown event kind {k}"))),
        };
        Ok(ClusterEvent { seq, body })
    }
}
