//! Wire frames for the networked backend.
//!
//! `[u32 total_len][u8 opcode][u32 region_id][u64 offset][payload]`, all
//! little-endian. `total_len` counts every byte of the frame including the
//! length field itself.

use std::io::{self, Read, Write};

pub const FRAME_HEADER_LEN: usize = 4 + 1 + 4 + 8;
pub const MAX_FRAME_LEN: usize = 64 << 20;

/// Marks a read response for a read that could not be served.
pub const READ_ERROR_OFFSET: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Write = 1,
    ReadReq = 2,
    ReadResp = 3,
    Handshake = 4,
}

impl TryFrom<u8> for Opcode {
    type Error = io::Error;

    fn try_from(v: u8) -> io::Result<Self> {
        match v {
            1 => Ok(Opcode::Write),
            2 => Ok(Opcode::ReadReq),
            3 => Ok(Opcode::ReadResp),
            4 => Ok(Opcode::Handshake),
            other => Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unknown opcode {other}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub region_id: u32,
    pub offset: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn write(region_id: u32, offset: u64, bytes: &[u8]) -> Self {
        Frame {
            opcode: Opcode::Write,
            region_id,
            offset,
            payload: bytes.to_vec(),
        }
    }

    pub fn read_req(region_id: u32, offset: u64, len: u32) -> Self {
        Frame {
            opcode: Opcode::ReadReq,
            region_id,
            offset,
            payload: len.to_le_bytes().to_vec(),
        }
    }

    pub fn handshake(record: Vec<u8>) -> Self {
        Frame {
            opcode: Opcode::Handshake,
            region_id: 0,
            offset: 0,
            payload: record,
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let total = (FRAME_HEADER_LEN + self.payload.len()) as u32;
        out.extend_from_slice(&total.to_le_bytes());
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.region_id.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> io::Result<Frame> {
        read_frame(&mut &bytes[..])
    }
}

pub fn read_frame(r: &mut impl Read) -> io::Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let total = u32::from_le_bytes(len) as usize;
    if !(FRAME_HEADER_LEN..=MAX_FRAME_LEN).contains(&total) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {total} out of range"),
        ));
    }
    let mut rest = vec![0u8; total - 4];
    r.read_exact(&mut rest)?;
    Ok(Frame {
        opcode: Opcode::try_from(rest[0])?,
        region_id: u32::from_le_bytes(rest[1..5].try_into().unwrap()),
        offset: u64::from_le_bytes(rest[5..13].try_into().unwrap()),
        payload: rest[13..].to_vec(),
    })
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())
}
