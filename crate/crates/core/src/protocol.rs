//! Byte layout and state machine of a per-client buffer slot.
//!
//! ```text
//! byte 0        state (0 Empty, 1 ClientWriteDone, 2 ServerComputationDone, 3 Offline)
//! bytes 1..8    reserved, zero
//! bytes 8..32   header: layer_id u32 @8, num_rows u32 @12, hidden_dim u32 @16,
//!               payload_len u32 @20, request_seq u64 @24
//! bytes 32..    payload (payload_len bytes)
//! then          CRC32 (IEEE) of bytes 8..32+payload_len, u32
//! ```
//!
//! All integers and floats are little-endian. A request row is
//! `hidden_dim` f32 values, then `expert_id` u32, `router_score` f32 and
//! `token_tag` u32. A response row is `hidden_dim` f32 values holding the
//! score-weighted expert output. The state byte is always written last.

use crate::transport::{Completion, Connection, Region, RegionDescriptor};
use crate::{Error, ExpertId, Result};

pub const STATE_OFFSET: usize = 0;
pub const HEADER_OFFSET: usize = 8;
pub const PAYLOAD_OFFSET: usize = 32;
pub const CRC_LEN: usize = 4;
/// Bytes per request row beyond the hidden vector.
pub const ROW_META_LEN: usize = 12;

pub fn request_row_len(hidden_dim: usize) -> usize {
    4 * hidden_dim + ROW_META_LEN
}

pub fn response_row_len(hidden_dim: usize) -> usize {
    4 * hidden_dim
}

/// Region length needed for a slot holding up to `max_rows` request rows.
pub fn slot_len(hidden_dim: usize, max_rows: usize) -> usize {
    PAYLOAD_OFFSET + max_rows * request_row_len(hidden_dim) + CRC_LEN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum SlotState {
    Empty = 0,
    ClientWriteDone = 1,
    ServerComputationDone = 2,
    Offline = 3,
}

impl TryFrom<u8> for SlotState {
    type Error = DecodeError;

    fn try_from(v: u8) -> Result<Self, DecodeError> {
        match v {
            0 => Ok(SlotState::Empty),
            1 => Ok(SlotState::ClientWriteDone),
            2 => Ok(SlotState::ServerComputationDone),
            3 => Ok(SlotState::Offline),
            other => Err(DecodeError::BadState(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    Client,
    Server,
    Monitor,
}

/// The transition table of the slot state machine.
pub fn valid_transition(from: SlotState, to: SlotState, actor: Actor) -> bool {
    use SlotState::*;
    matches!(
        (from, to, actor),
        (Empty, ClientWriteDone, Actor::Client)
            | (ClientWriteDone, ServerComputationDone, Actor::Server)
            | (ServerComputationDone, Empty, Actor::Client)
            | (_, Offline, Actor::Monitor)
            | (Offline, Empty, Actor::Server)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated {field}: need {need} bytes, have {have}")]
    Truncated {
        field: &'static str,
        need: usize,
        have: usize,
    },
    #[error("bad state code {0}")]
    BadState(u8),
    #[error("unexpected state {found:?}, wanted {wanted:?}")]
    WrongState { found: SlotState, wanted: SlotState },
    #[error("reserved byte {0} is not zero")]
    Reserved(usize),
    #[error("field {field} mismatch: header says {header}, expected {expected}")]
    Mismatch {
        field: &'static str,
        header: u64,
        expected: u64,
    },
    #[error("checksum mismatch")]
    Checksum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotHeader {
    pub layer_id: u32,
    pub num_rows: u32,
    pub hidden_dim: u32,
    pub payload_len: u32,
    pub request_seq: u64,
}

impl SlotHeader {
    pub fn request(layer_id: u32, num_rows: usize, hidden_dim: usize, request_seq: u64) -> Self {
        SlotHeader {
            layer_id,
            num_rows: num_rows as u32,
            hidden_dim: hidden_dim as u32,
            payload_len: (num_rows * request_row_len(hidden_dim)) as u32,
            request_seq,
        }
    }

    pub fn response(&self, num_rows: usize) -> Self {
        SlotHeader {
            num_rows: num_rows as u32,
            payload_len: (num_rows * response_row_len(self.hidden_dim as usize)) as u32,
            ..*self
        }
    }

    pub fn to_bytes(&self) -> [u8; 24] {
        let mut b = [0u8; 24];
        b[0..4].copy_from_slice(&self.layer_id.to_le_bytes());
        b[4..8].copy_from_slice(&self.num_rows.to_le_bytes());
        b[8..12].copy_from_slice(&self.hidden_dim.to_le_bytes());
        b[12..16].copy_from_slice(&self.payload_len.to_le_bytes());
        b[16..24].copy_from_slice(&self.request_seq.to_le_bytes());
        b
    }

    /// Parses the 24 header bytes (slot bytes 8..32).
    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        if b.len() < 24 {
            return Err(DecodeError::Truncated {
                field: "header",
                need: 24,
                have: b.len(),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Ok(SlotHeader {
            layer_id: u32_at(0),
            num_rows: u32_at(4),
            hidden_dim: u32_at(8),
            payload_len: u32_at(12),
            request_seq: u64::from_le_bytes(b[16..24].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRow {
    pub hidden: Vec<f32>,
    pub expert_id: ExpertId,
    pub router_score: f32,
    pub token_tag: u32,
}

fn image_prefix(state: SlotState, header: &SlotHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAYLOAD_OFFSET + header.payload_len as usize);
    out.push(state as u8);
    out.extend_from_slice(&[0u8; 7]);
    out.extend_from_slice(&header.to_bytes());
    out
}

/// Encodes a request image (state byte 1, header, rows); no checksum trailer.
pub fn encode_request(header: &SlotHeader, rows: &[RequestRow]) -> Result<Vec<u8>> {
    let d = header.hidden_dim as usize;
    let expected = SlotHeader::request(header.layer_id, rows.len(), d, header.request_seq);
    if *header != expected {
        return Err(Error::rejected(format!(
            "request header {header:?} inconsistent with {} rows",
            rows.len()
        )));
    }
    if !rows.is_empty() && d == 0 {
        return Err(Error::rejected("request rows need a positive hidden_dim"));
    }
    let mut out = image_prefix(SlotState::ClientWriteDone, header);
    for (i, row) in rows.iter().enumerate() {
        if row.hidden.len() != d {
            return Err(Error::rejected(format!(
                "row {i} has width {}, header says {d}",
                row.hidden.len()
            )));
        }
        if !(0.0..=1.0).contains(&row.router_score) {
            return Err(Error::rejected(format!(
                "row {i} router score {} outside [0, 1]",
                row.router_score
            )));
        }
        for v in &row.hidden {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&row.expert_id.to_le_bytes());
        out.extend_from_slice(&row.router_score.to_le_bytes());
        out.extend_from_slice(&row.token_tag.to_le_bytes());
    }
    Ok(out)
}

/// Validates the prefix of an image and returns its header and payload.
fn decode_prefix(bytes: &[u8], wanted: SlotState) -> Result<(SlotHeader, &[u8]), DecodeError> {
    if bytes.len() < PAYLOAD_OFFSET {
        return Err(DecodeError::Truncated {
            field: "header",
            need: PAYLOAD_OFFSET,
            have: bytes.len(),
        });
    }
    let state = SlotState::try_from(bytes[STATE_OFFSET])?;
    if state != wanted {
        return Err(DecodeError::WrongState {
            found: state,
            wanted,
        });
    }
    if let Some(i) = (1..HEADER_OFFSET).find(|&i| bytes[i] != 0) {
        return Err(DecodeError::Reserved(i));
    }
    let header = SlotHeader::from_bytes(&bytes[HEADER_OFFSET..PAYLOAD_OFFSET])?;
    let row_len = match wanted {
        SlotState::ServerComputationDone => response_row_len(header.hidden_dim as usize),
        _ => request_row_len(header.hidden_dim as usize),
    } as u64;
    let expected = header.num_rows as u64 * row_len;
    if header.payload_len as u64 != expected {
        return Err(DecodeError::Mismatch {
            field: "payload_len",
            header: header.payload_len as u64,
            expected,
        });
    }
    if header.num_rows > 0 && header.hidden_dim == 0 {
        return Err(DecodeError::Mismatch {
            field: "hidden_dim",
            header: 0,
            expected: 1,
        });
    }
    let end = PAYLOAD_OFFSET + header.payload_len as usize;
    if bytes.len() < end {
        return Err(DecodeError::Truncated {
            field: "payload",
            need: end,
            have: bytes.len(),
        });
    }
    Ok((header, &bytes[PAYLOAD_OFFSET..end]))
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

/// Decodes a request image. Trailing bytes past the payload are ignored.
pub fn decode_request(bytes: &[u8]) -> Result<(SlotHeader, Vec<RequestRow>), DecodeError> {
    let (header, payload) = decode_prefix(bytes, SlotState::ClientWriteDone)?;
    let d = header.hidden_dim as usize;
    let row_len = request_row_len(d);
    let rows = payload
        .chunks_exact(row_len.max(1))
        .take(header.num_rows as usize)
        .map(|r| RequestRow {
            hidden: (0..d).map(|j| f32_at(r, 4 * j)).collect(),
            expert_id: u32_at(r, 4 * d),
            router_score: f32_at(r, 4 * d + 4),
            token_tag: u32_at(r, 4 * d + 8),
        })
        .collect();
    Ok((header, rows))
}

/// Encodes a response image (state byte 2); `outputs` is `num_rows * hidden_dim`.
pub fn encode_response(header: &SlotHeader, outputs: &[f32]) -> Result<Vec<u8>> {
    let d = header.hidden_dim as usize;
    let rows = outputs.len().checked_div(d).unwrap_or(0);
    if rows * d != outputs.len() || *header != header.response(rows) {
        return Err(Error::rejected(format!(
            "response header {header:?} inconsistent with {} values",
            outputs.len()
        )));
    }
    let mut out = image_prefix(SlotState::ServerComputationDone, header);
    for v in outputs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_response(bytes: &[u8]) -> Result<(SlotHeader, Vec<f32>), DecodeError> {
    let (header, payload) = decode_prefix(bytes, SlotState::ServerComputationDone)?;
    let values = payload.chunks_exact(4).map(|c| f32_at(c, 0)).collect();
    Ok((header, values))
}

/// CRC32 over the header and payload of an image (bytes 8..end).
pub fn image_crc(image: &[u8]) -> u32 {
    crc32fast::hash(&image[HEADER_OFFSET..])
}

/// Appends the checksum trailer to an encoded image.
pub fn seal(mut image: Vec<u8>) -> Vec<u8> {
    let crc = image_crc(&image);
    image.extend_from_slice(&crc.to_le_bytes());
    image
}

/// Checks the trailer that follows the payload of a slot image.
pub fn verify_sealed(bytes: &[u8]) -> Result<(), DecodeError> {
    if bytes.len() < PAYLOAD_OFFSET {
        return Err(DecodeError::Truncated {
            field: "header",
            need: PAYLOAD_OFFSET,
            have: bytes.len(),
        });
    }
    let header = SlotHeader::from_bytes(&bytes[HEADER_OFFSET..PAYLOAD_OFFSET])?;
    let end = PAYLOAD_OFFSET.saturating_add(header.payload_len as usize);
    if bytes.len() < end + CRC_LEN {
        return Err(DecodeError::Truncated {
            field: "checksum",
            need: end + CRC_LEN,
            have: bytes.len(),
        });
    }
    let stored = u32_at(bytes, end);
    if crc32fast::hash(&bytes[HEADER_OFFSET..end]) != stored {
        return Err(DecodeError::Checksum);
    }
    Ok(())
}

/// Decodes a sealed request image, checking the trailer first.
pub fn decode_sealed_request(bytes: &[u8]) -> Result<(SlotHeader, Vec<RequestRow>), DecodeError> {
    verify_sealed(bytes)?;
    decode_request(bytes)
}

pub fn decode_sealed_response(bytes: &[u8]) -> Result<(SlotHeader, Vec<f32>), DecodeError> {
    verify_sealed(bytes)?;
    decode_response(bytes)
}

/// Client-side view of one remote slot.
#[derive(Debug, Clone)]
pub struct ClientSlot {
    pub region: RegionDescriptor,
    /// Last state this client wrote or observed.
    pub shadow: SlotState,
    pub last_seq: u64,
}

impl ClientSlot {
    pub fn new(region: RegionDescriptor) -> Self {
        ClientSlot {
            region,
            shadow: SlotState::Empty,
            last_seq: 0,
        }
    }

    pub fn capacity_rows(&self, hidden_dim: usize) -> usize {
        (self.region.length as usize).saturating_sub(PAYLOAD_OFFSET + CRC_LEN)
            / request_row_len(hidden_dim)
    }
}

/// Writes payload, then header, then the state byte. The returned completion
/// resolves once the state byte is visible at the server.
pub fn client_submit(
    conn: &mut dyn Connection,
    slot: &mut ClientSlot,
    header: &SlotHeader,
    rows: &[RequestRow],
) -> Result<Completion> {
    if slot.shadow != SlotState::Empty {
        return Err(Error::protocol(format!(
            "slot {} is {:?}, not Empty",
            slot.region.region_id, slot.shadow
        )));
    }
    if header.request_seq <= slot.last_seq {
        return Err(Error::protocol(format!(
            "request_seq {} does not advance past {}",
            header.request_seq, slot.last_seq
        )));
    }
    let image = seal(encode_request(header, rows)?);
    if image.len() as u64 > slot.region.length {
        return Err(Error::protocol(format!(
            "request of {} bytes exceeds slot of {} bytes",
            image.len(),
            slot.region.length
        )));
    }
    let id = slot.region.region_id;
    conn.write(id, PAYLOAD_OFFSET as u64, &image[PAYLOAD_OFFSET..])?;
    conn.write(id, HEADER_OFFSET as u64, &image[HEADER_OFFSET..PAYLOAD_OFFSET])?;
    let done = conn.write(id, STATE_OFFSET as u64, &[SlotState::ClientWriteDone as u8])?;
    slot.shadow = SlotState::ClientWriteDone;
    slot.last_seq = header.request_seq;
    Ok(done)
}

/// Outcome of polling a submitted slot once.
#[derive(Debug, Clone, PartialEq)]
pub enum PollOutcome {
    Pending,
    Ready { header: SlotHeader, outputs: Vec<f32> },
    /// The server released the slot (state 3).
    Released,
}

/// Reads the slot flag; on state 2, reads and checks the response, then hands
/// the slot back to Empty.
pub fn client_poll(conn: &mut dyn Connection, slot: &mut ClientSlot) -> Result<PollOutcome> {
    let id = slot.region.region_id;
    let flag = conn.read(id, STATE_OFFSET as u64, 1)?;
    let state = SlotState::try_from(flag[0])?;
    match state {
        SlotState::ServerComputationDone => {}
        SlotState::Offline => return Ok(PollOutcome::Released),
        _ => return Ok(PollOutcome::Pending),
    }
    let prefix = conn.read(id, 0, PAYLOAD_OFFSET)?;
    let header = SlotHeader::from_bytes(&prefix[HEADER_OFFSET..])?;
    let rest = conn.read(
        id,
        PAYLOAD_OFFSET as u64,
        header.payload_len as usize + CRC_LEN,
    )?;
    let mut image = prefix;
    image.extend_from_slice(&rest);
    let (header, outputs) = decode_sealed_response(&image)?;
    if header.request_seq != slot.last_seq {
        return Err(Error::protocol(format!(
            "response seq {} does not match request seq {}",
            header.request_seq, slot.last_seq
        )));
    }
    conn.write(id, STATE_OFFSET as u64, &[SlotState::Empty as u8])?;
    slot.shadow = SlotState::Empty;
    Ok(PollOutcome::Ready { header, outputs })
}

/// Reads a slot from server-local memory. `Ok(None)` when the slot is not in
/// state 1.
pub fn server_read_request(
    region: &Region,
) -> Result<Option<(SlotHeader, Vec<RequestRow>)>, DecodeError> {
    let flag = region.read_local(0, 1).map_err(|_| DecodeError::Truncated {
        field: "state",
        need: 1,
        have: 0,
    })?;
    if SlotState::try_from(flag[0])? != SlotState::ClientWriteDone {
        return Ok(None);
    }
    let prefix = region
        .read_local(0, PAYLOAD_OFFSET)
        .map_err(|_| DecodeError::Truncated {
            field: "header",
            need: PAYLOAD_OFFSET,
            have: region.len(),
        })?;
    let header = SlotHeader::from_bytes(&prefix[HEADER_OFFSET..])?;
    let total = PAYLOAD_OFFSET + header.payload_len as usize + CRC_LEN;
    let image = region
        .read_local(0, total)
        .map_err(|_| DecodeError::Truncated {
            field: "payload",
            need: total,
            have: region.len(),
        })?;
    decode_sealed_request(&image).map(Some)
}

/// Writes results over the request payload, then the header, then state 2.
pub fn server_publish(region: &Region, request: &SlotHeader, outputs: &[f32]) -> Result<()> {
    let d = request.hidden_dim as usize;
    let rows = outputs.len().checked_div(d).unwrap_or(0);
    let header = request.response(rows);
    let image = seal(encode_response(&header, outputs)?);
    region.write_local(PAYLOAD_OFFSET, &image[PAYLOAD_OFFSET..])?;
    region.write_local(HEADER_OFFSET, &image[HEADER_OFFSET..PAYLOAD_OFFSET])?;
    region.write_local(
        STATE_OFFSET,
        &[SlotState::ServerComputationDone as u8],
    )?;
    Ok(())
}

/// Marks a slot Offline, as the monitor's delegate on the owning server.
pub fn server_mark_offline(region: &Region) -> Result<()> {
    region.write_local(STATE_OFFSET, &[SlotState::Offline as u8])
}

/// Reallocates an Offline slot: zero the contents, then state Empty.
pub fn server_reallocate(region: &Region) -> Result<()> {
    let len = region.len();
    region.write_local(HEADER_OFFSET, &vec![0u8; len - HEADER_OFFSET])?;
    region.write_local(STATE_OFFSET, &[SlotState::Empty as u8])
}
