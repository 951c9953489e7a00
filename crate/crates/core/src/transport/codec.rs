//! Binary frame format.
//!
//! ```text
//! "LAPG" | version u8 | kind u8 | learner_id u16 | iteration u32 | payload_len u32
//!        | payload_len x f64 | sigma2 f64 (upload kinds only)
//! ```
//!
//! All integers and floats are little-endian. `payload_len` counts `f64` elements. A missing
//! variance estimate travels as NaN.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LAPG";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Largest payload accepted by the decoder, in elements.
pub const MAX_PAYLOAD: u32 = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Broadcast = 0,
    UploadDelta = 1,
    UploadFull = 2,
    Ack = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Kind> {
        Ok(match b {
            0 => Kind::Broadcast,
            1 => Kind::UploadDelta,
            2 => Kind::UploadFull,
            3 => Kind::Ack,
            other => return Err(Error::Decode(format!("unknown frame kind {other}"))),
        })
    }

    fn has_sigma(self) -> bool {
        matches!(self, Kind::UploadDelta | Kind::UploadFull)
    }
}

/// A frame on the controller/learner link. Learner ids are 1-based; broadcasts carry 0.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Broadcast {
        iteration: u32,
        theta: Vec<f64>,
    },
    UploadDelta {
        learner_id: u16,
        iteration: u32,
        delta: Vec<f64>,
        sigma2: Option<f64>,
    },
    UploadFull {
        learner_id: u16,
        iteration: u32,
        grad: Vec<f64>,
        sigma2: Option<f64>,
    },
    /// End of a learner's reply (payload: telemetry), or a HELLO at connection time.
    Ack {
        learner_id: u16,
        iteration: u32,
        payload: Vec<f64>,
    },
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::Broadcast { .. } => Kind::Broadcast,
            Message::UploadDelta { .. } => Kind::UploadDelta,
            Message::UploadFull { .. } => Kind::UploadFull,
            Message::Ack { .. } => Kind::Ack,
        }
    }

    pub fn learner_id(&self) -> u16 {
        match self {
            Message::Broadcast { .. } => 0,
            Message::UploadDelta { learner_id, .. }
            | Message::UploadFull { learner_id, .. }
            | Message::Ack { learner_id, .. } => *learner_id,
        }
    }

    pub fn iteration(&self) -> u32 {
        match self {
            Message::Broadcast { iteration, .. }
            | Message::UploadDelta { iteration, .. }
            | Message::UploadFull { iteration, .. }
            | Message::Ack { iteration, .. } => *iteration,
        }
    }

    pub fn payload(&self) -> &[f64] {
        match self {
            Message::Broadcast { theta: v, .. }
            | Message::UploadDelta { delta: v, .. }
            | Message::UploadFull { grad: v, .. }
            | Message::Ack { payload: v, .. } => v,
        }
    }

    fn sigma2(&self) -> Option<f64> {
        match self {
            Message::UploadDelta { sigma2, .. } | Message::UploadFull { sigma2, .. } => *sigma2,
            _ => None,
        }
    }

    /// Encoded size in bytes.
    pub fn frame_len(&self) -> usize {
        frame_len(self.kind(), self.payload().len())
    }
}

/// Encoded size of a frame of `kind` with `elements` payload entries.
pub fn frame_len(kind: Kind, elements: usize) -> usize {
    HEADER_LEN + 8 * elements + if kind.has_sigma() { 8 } else { 0 }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let payload = msg.payload();
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_PAYLOAD)
        .ok_or_else(|| Error::Protocol(format!("payload of {} elements is too large", payload.len())))?;
    let mut out = Vec::with_capacity(msg.frame_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind() as u8);
    out.extend_from_slice(&msg.learner_id().to_le_bytes());
    out.extend_from_slice(&msg.iteration().to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if msg.kind().has_sigma() {
        out.extend_from_slice(&msg.sigma2().unwrap_or(f64::NAN).to_le_bytes());
    }
    Ok(out)
}

struct Header {
    kind: Kind,
    learner_id: u16,
    iteration: u32,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    if h[..4] != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    if h[4] != VERSION {
        return Err(Error::Decode(format!("unsupported version {}", h[4])));
    }
    let kind = Kind::from_byte(h[5])?;
    let learner_id = u16::from_le_bytes([h[6], h[7]]);
    let iteration = u32::from_le_bytes([h[8], h[9], h[10], h[11]]);
    let len = u32::from_le_bytes([h[12], h[13], h[14], h[15]]);
    if len > MAX_PAYLOAD {
        return Err(Error::Decode(format!("payload length {len} exceeds the limit")));
    }
    Ok(Header {
        kind,
        learner_id,
        iteration,
        len: len as usize,
    })
}

fn build(h: Header, body: &[u8]) -> Message {
    let mut floats = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let payload: Vec<f64> = floats.by_ref().take(h.len).collect();
    let sigma2 = floats.next().filter(|s| !s.is_nan());
    match h.kind {
        Kind::Broadcast => Message::Broadcast {
            iteration: h.iteration,
            theta: payload,
        },
        Kind::UploadDelta => Message::UploadDelta {
            learner_id: h.learner_id,
            iteration: h.iteration,
            delta: payload,
            sigma2,
        },
        Kind::UploadFull => Message::UploadFull {
            learner_id: h.learner_id,
            iteration: h.iteration,
            grad: payload,
            sigma2,
        },
        Kind::Ack => Message::Ack {
            learner_id: h.learner_id,
            iteration: h.iteration,
            payload,
        },
    }
}

/// Decodes one frame from the front of `bytes`, returning it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize)> {
    let header: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Decode(format!("truncated header: {} bytes", bytes.len())))?;
    let h = parse_header(header)?;
    let total = frame_len(h.kind, h.len);
    let body = bytes
        .get(HEADER_LEN..total)
        .ok_or_else(|| Error::Decode(format!("truncated frame: {} of {total} bytes", bytes.len())))?;
    Ok((build(h, body), total))
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::Decode("connection closed inside a header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header)?;
    let mut body = vec![0u8; frame_len(h.kind, h.len) - HEADER_LEN];
    reader.read_exact(&mut body)?;
    Ok(Some(build(h, &body)))
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &Message) -> Result<usize> {
    let bytes = encode(msg)?;
    writer.write_all(&bytes)?;
    Ok(bytes.len())
}
