//! Connection setup.
//!
//! Three request/response exchanges, always initiated by the client:
//!
//! 1. `Hello` carries the client's communication handler; the server answers
//!    `Mirror` with its own (both sides now `HandlerExchanged`).
//! 2. `QueueReady` reports that the client advanced its queue state; the
//!    server acknowledges. Real hardware steps through several queue-pair
//!    states here; they collapse into this single readiness phase.
//! 3. `Regions` carries the client's registered staging region; the server
//!    registers the client's slots and answers with their descriptors. Both
//!    sides mark the peer `Ready`.
//!
//! Records are length-prefixed binary: `[u8 kind][u32 body_len][body]`.

use crate::transport::{ConnState, HandshakeHandler, RegionDescriptor};
use crate::{ClientId, Error, Result, ServerId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeMsg {
    Hello { client: ClientId, handler: u64 },
    Mirror { server: ServerId, handler: u64 },
    QueueReady { client: ClientId },
    QueueReadyAck,
    Regions(Vec<RegionDescriptor>),
    Error(String),
}

impl HandshakeMsg {
    pub fn encode(&self) -> Vec<u8> {
        let (kind, body) = match self {
            HandshakeMsg::Hello { client, handler } => {
                let mut b = client.0.to_le_bytes().to_vec();
                b.extend_from_slice(&handler.to_le_bytes());
                (1u8, b)
            }
            HandshakeMsg::Mirror { server, handler } => {
                let mut b = server.0.to_le_bytes().to_vec();
                b.extend_from_slice(&handler.to_le_bytes());
                (2, b)
            }
            HandshakeMsg::QueueReady { client } => (3, client.0.to_le_bytes().to_vec()),
            HandshakeMsg::QueueReadyAck => (4, Vec::new()),
            HandshakeMsg::Regions(regions) => {
                let mut b = (regions.len() as u32).to_le_bytes().to_vec();
                for r in regions {
                    b.extend_from_slice(&r.region_id.to_le_bytes());
                    b.extend_from_slice(&r.owner.to_le_bytes());
                    b.extend_from_slice(&r.length.to_le_bytes());
                }
                (5, b)
            }
            HandshakeMsg::Error(msg) => (6, msg.as_bytes().to_vec()),
        };
        let mut out = vec![kind];
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::protocol("malformed handshake record");
        if bytes.len() < 5 {
            return Err(bad());
        }
        let len = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
        let body = bytes.get(5..5 + len).ok_or_else(bad)?;
        let u32_at = |o: usize| -> Result<u32> {
            body.get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(bad)
        };
        let u64_at = |o: usize| -> Result<u64> {
            body.get(o..o + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(bad)
        };
        Ok(match bytes[0] {
            1 => HandshakeMsg::Hello {
                client: ClientId(u32_at(0)?),
                handler: u64_at(4)?,
            },
            2 => HandshakeMsg::Mirror {
                server: ServerId(u32_at(0)?),
                handler: u64_at(4)?,
            },
            3 => HandshakeMsg::QueueReady {
                client: ClientId(u32_at(0)?),
            },
            4 => HandshakeMsg::QueueReadyAck,
            5 => {
                let n = u32_at(0)? as usize;
                let mut regions = Vec::with_capacity(n.min(1024));
                for i in 0..n {
                    let o = 4 + i * 16;
                    regions.push(RegionDescriptor {
                        region_id: u32_at(o)?,
                        owner: u32_at(o + 4)?,
                        length: u64_at(o + 8)?,
                    });
                }
                HandshakeMsg::Regions(regions)
            }
            6 => HandshakeMsg::Error(String::from_utf8_lossy(body).into_owned()),
            _ => return Err(bad()),
        })
    }
}

/// Server side of one handshake.
pub struct ServerSession {
    server: ServerId,
    state: ConnState,
    client: Option<ClientId>,
    queue_ready: bool,
    handler_id: u64,
}

impl ServerSession {
    pub fn new(server: ServerId, handler_id: u64) -> Self {
        ServerSession {
            server,
            state: ConnState::Init,
            client: None,
            queue_ready: false,
            handler_id,
        }
    }

    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn client(&self) -> Option<ClientId> {
        self.client
    }

    pub fn step(&mut self, msg: HandshakeMsg, handler: &dyn HandshakeHandler) -> HandshakeMsg {
        match self.try_step(msg, handler) {
            Ok(reply) => reply,
            Err(e) => {
                self.state = ConnState::Closed;
                HandshakeMsg::Error(e.to_string())
            }
        }
    }

    fn try_step(&mut self, msg: HandshakeMsg, handler: &dyn HandshakeHandler) -> Result<HandshakeMsg> {
        match (self.state, msg) {
            (ConnState::Init, HandshakeMsg::Hello { client, .. }) => {
                self.client = Some(client);
                self.state = ConnState::HandlerExchanged;
                Ok(HandshakeMsg::Mirror {
                    server: self.server,
                    handler: self.handler_id,
                })
            }
            (ConnState::HandlerExchanged, HandshakeMsg::QueueReady { client })
                if Some(client) == self.client && !self.queue_ready =>
            {
                self.queue_ready = true;
                Ok(HandshakeMsg::QueueReadyAck)
            }
            (ConnState::HandlerExchanged, HandshakeMsg::Regions(client_regions))
                if self.queue_ready =>
            {
                let client = self.client.expect("client set in hello");
                let regions = handler.accept(client, &client_regions)?;
                self.state = ConnState::Ready;
                Ok(HandshakeMsg::Regions(regions))
            }
            (state, msg) => Err(Error::protocol(format!(
                "handshake message {msg:?} not valid in state {state:?}"
            ))),
        }
    }
}

/// Runs the client side of the handshake over `exchange`, a synchronous
/// request/response channel. Returns the server's region descriptors.
pub fn client_handshake(
    client: ClientId,
    server: ServerId,
    handler_id: u64,
    staging: RegionDescriptor,
    exchange: &mut dyn FnMut(HandshakeMsg) -> Result<HandshakeMsg>,
) -> Result<Vec<RegionDescriptor>> {
    let conn_err = |reason: String| Error::Connection {
        client,
        server,
        reason,
    };
    match exchange(HandshakeMsg::Hello {
        client,
        handler: handler_id,
    })? {
        HandshakeMsg::Mirror { server: s, .. } if s == server => {}
        other => return Err(conn_err(format!("expected mirror, got {other:?}"))),
    }
    match exchange(HandshakeMsg::QueueReady { client })? {
        HandshakeMsg::QueueReadyAck => {}
        other => return Err(conn_err(format!("expected queue ack, got {other:?}"))),
    }
    match exchange(HandshakeMsg::Regions(vec![staging]))? {
        HandshakeMsg::Regions(regions) => Ok(regions),
        other => Err(conn_err(format!("expected regions, got {other:?}"))),
    }
}
