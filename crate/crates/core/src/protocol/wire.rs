//! Byte layout of protocol messages.
//!
//! Every message is a 14-byte header followed by `payload_len` bytes:
//!
//! | offset | size | field                                     |
//! |-------:|-----:|-------------------------------------------|
//! | 0      | 2    | magic `0x4E 0x43`                         |
//! | 2      | 1    | version (1)                               |
//! | 3      | 1    | type: 0 HELLO, 1 FEATURE, 2 LOGITS, 3 EXIT, 4 ERROR |
//! | 4      | 4    | session id, big-endian                    |
//! | 8      | 1    | timestep (1-based; 0 for HELLO and ERROR) |
//! | 9      | 1    | flags, bit 0 = bottleneck-compressed      |
//! | 10     | 4    | payload length, big-endian                |
//!
//! Payloads:
//! * HELLO: 32-byte configuration digest.
//! * FEATURE: four u16 extents `(C, H, W, 0)` then the packed spike bits.
//! * LOGITS: u16 class count `K`, then `K` big-endian f32 decision logits.
//! * EXIT: u16 predicted class; the header timestep carries `t_exit`.
//! * ERROR: one code byte then a UTF-8 message.

use thiserror::Error;

use crate::tensor::{packed_len, Shape, SpikeTensor, TensorError};

pub const MAGIC: [u8; 2] = [0x4E, 0x43];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const FLAG_COMPRESSED: u8 = 0x01;
/// Bytes of shape prefix in a FEATURE payload.
pub const FEATURE_SHAPE_LEN: usize = 8;
pub const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    /// Not enough bytes yet; a stream reader may retry after reading more.
    #[error("framing: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("framing: {0} bytes after the declared payload")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes does not fit the length field")]
    PayloadTooLarge(usize),
    #[error("timestep {timestep} invalid for {msg_type:?}")]
    BadTimestep { msg_type: MsgType, timestep: u8 },
    #[error("nonzero padding bits in spike payload")]
    PadBits,
    #[error("malformed {msg_type:?} payload: {reason}")]
    BadPayload { msg_type: MsgType, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Feature = 1,
    Logits = 2,
    Exit = 3,
    Error = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => MsgType::Hello,
            1 => MsgType::Feature,
            2 => MsgType::Logits,
            3 => MsgType::Exit,
            4 => MsgType::Error,
            _ => return Err(WireError::UnknownType(v)),
        })
    }

    fn needs_timestep(self) -> bool {
        matches!(self, MsgType::Feature | MsgType::Logits | MsgType::Exit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub session_id: u32,
    pub timestep: u8,
    pub flags: u8,
    pub payload_len: u32,
}

impl Header {
    pub fn new(msg_type: MsgType, session_id: u32, timestep: u8, flags: u8) -> Self {
        Self {
            msg_type,
            session_id,
            timestep,
            flags,
            payload_len: 0,
        }
    }

    pub fn compressed(&self) -> bool {
        self.flags & FLAG_COMPRESSED != 0
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = VERSION;
        b[3] = self.msg_type as u8;
        b[4..8].copy_from_slice(&self.session_id.to_be_bytes());
        b[8] = self.timestep;
        b[9] = self.flags;
        b[10..14].copy_from_slice(&self.payload_len.to_be_bytes());
        b
    }

    /// Parse and validate the first 14 bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        if bytes[0..2] != MAGIC {
            return Err(WireError::BadMagic(u16::from_be_bytes([bytes[0], bytes[1]])));
        }
        if bytes[2] != VERSION {
            return Err(WireError::UnsupportedVersion(bytes[2]));
        }
        let msg_type = MsgType::from_u8(bytes[3])?;
        let timestep = bytes[8];
        let stepped = msg_type.needs_timestep();
        if stepped == (timestep == 0) {
            return Err(WireError::BadTimestep { msg_type, timestep });
        }
        Ok(Self {
            msg_type,
            session_id: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            timestep,
            flags: bytes[9],
            payload_len: payload_len_field(bytes),
        })
    }
}

/// The length field of a header, without validating anything else.
pub fn payload_len_field(header: &[u8]) -> u32 {
    u32::from_be_bytes(header[10..14].try_into().unwrap())
}

pub fn encode_message(header: &Header, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let len = u32::try_from(payload.len()).map_err(|_| WireError::PayloadTooLarge(payload.len()))?;
    if header.msg_type.needs_timestep() == (header.timestep == 0) {
        return Err(WireError::BadTimestep {
            msg_type: header.msg_type,
            timestep: header.timestep,
        });
    }
    let mut h = *header;
    h.payload_len = len;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&h.to_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decode exactly one message occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<(Header, Vec<u8>), WireError> {
    let h = Header::parse(bytes)?;
    let total = HEADER_LEN + h.payload_len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(WireError::TrailingBytes(bytes.len() - total));
    }
    Ok((h, bytes[HEADER_LEN..].to_vec()))
}

fn bad(msg_type: MsgType, reason: impl Into<String>) -> WireError {
    WireError::BadPayload {
        msg_type,
        reason: reason.into(),
    }
}

/// Typed message bodies.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello { digest: [u8; DIGEST_LEN] },
    Feature { spikes: SpikeTensor },
    Logits { logits: Vec<f32> },
    Exit { prediction: u16 },
    Error { code: ErrorCode, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCode {
    Handshake,
    Protocol,
    Shape,
    Internal,
    Other(u8),
}

impl ErrorCode {
    pub fn to_u8(self) -> u8 {
        match self {
            ErrorCode::Handshake => 1,
            ErrorCode::Protocol => 2,
            ErrorCode::Shape => 3,
            ErrorCode::Internal => 4,
            ErrorCode::Other(v) => v,
        }
    }

    pub fn from_u8(v: u8) -> Self {
        match v {
            1 => ErrorCode::Handshake,
            2 => ErrorCode::Protocol,
            3 => ErrorCode::Shape,
            4 => ErrorCode::Internal,
            v => ErrorCode::Other(v),
        }
    }
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello { .. } => MsgType::Hello,
            Message::Feature { .. } => MsgType::Feature,
            Message::Logits { .. } => MsgType::Logits,
            Message::Exit { .. } => MsgType::Exit,
            Message::Error { .. } => MsgType::Error,
        }
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>, WireError> {
        let t = self.msg_type();
        Ok(match self {
            Message::Hello { digest } => digest.to_vec(),
            Message::Feature { spikes } => {
                let (c, h, w) = feature_dims(spikes.shape()).ok_or_else(|| {
                    bad(t, format!("shape {} not expressible as (C,H,W) u16 extents", spikes.shape()))
                })?;
                let mut out = Vec::with_capacity(FEATURE_SHAPE_LEN + spikes.packed().len());
                for d in [c, h, w, 0] {
                    out.extend_from_slice(&d.to_be_bytes());
                }
                out.extend_from_slice(spikes.packed());
                out
            }
            Message::Logits { logits } => {
                let k = u16::try_from(logits.len()).map_err(|_| bad(t, "more than 65535 classes"))?;
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(bad(t, "non-finite logit"));
                }
                let mut out = Vec::with_capacity(2 + 4 * logits.len());
                out.extend_from_slice(&k.to_be_bytes());
                for v in logits {
                    out.extend_from_slice(&v.to_be_bytes());
                }
                out
            }
            Message::Exit { prediction } => prediction.to_be_bytes().to_vec(),
            Message::Error { code, message } => {
                let mut out = vec![code.to_u8()];
                out.extend_from_slice(message.as_bytes());
                out
            }
        })
    }

    pub fn decode_payload(msg_type: MsgType, payload: &[u8]) -> Result<Self, WireError> {
        let t = msg_type;
        Ok(match msg_type {
            MsgType::Hello => Message::Hello {
                digest: payload
                    .try_into()
                    .map_err(|_| bad(t, format!("{} digest bytes", payload.len())))?,
            },
            MsgType::Feature => {
                if payload.len() < FEATURE_SHAPE_LEN {
                    return Err(bad(t, "missing shape prefix"));
                }
                let d: Vec<usize> = (0..4)
                    .map(|i| u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as usize)
                    .collect();
                if d[3] != 0 {
                    return Err(bad(t, "reserved extent is nonzero"));
                }
                let shape = Shape::new(d[..3].to_vec()).map_err(|e| bad(t, e.to_string()))?;
                let bits = &payload[FEATURE_SHAPE_LEN..];
                if bits.len() != packed_len(shape.numel()) {
                    return Err(bad(
                        t,
                        format!("{} packed bytes for shape {shape}", bits.len()),
                    ));
                }
                let spikes = SpikeTensor::from_packed(shape, bits.to_vec()).map_err(|e| match e {
                    TensorError::NonZeroPadding => WireError::PadBits,
                    e => bad(t, e.to_string()),
                })?;
                Message::Feature { spikes }
            }
            MsgType::Logits => {
                if payload.len() < 2 {
                    return Err(bad(t, "missing class count"));
                }
                let k = u16::from_be_bytes([payload[0], payload[1]]) as usize;
                if payload.len() != 2 + 4 * k {
                    return Err(bad(t, format!("{} bytes for {k} logits", payload.len())));
                }
                let logits: Vec<f32> = payload[2..]
                    .chunks_exact(4)
                    .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                    .collect();
                if logits.iter().any(|v| !v.is_finite()) {
                    return Err(bad(t, "non-finite logit"));
                }
                Message::Logits { logits }
            }
            MsgType::Exit => Message::Exit {
                prediction: u16::from_be_bytes(
                    payload
                        .try_into()
                        .map_err(|_| bad(t, format!("{} bytes, expected 2", payload.len())))?,
                ),
            },
            MsgType::Error => {
                let (&code, rest) = payload.split_first().ok_or_else(|| bad(t, "empty"))?;
                Message::Error {
                    code: ErrorCode::from_u8(code),
                    message: String::from_utf8_lossy(rest).into_owned(),
                }
            }
        })
    }
}

/// Rank-3 shapes only (rank-1 features become (n,1,1)); every extent must fit u16.
fn feature_dims(s: &Shape) -> Option<(u16, u16, u16)> {
    let (c, h, w) = s.chw()?;
    Some((u16::try_from(c).ok()?, u16::try_from(h).ok()?, u16::try_from(w).ok()?))
}

/// Serialize a typed message.
pub fn encode(msg: &Message, session_id: u32, timestep: u8, flags: u8) -> Result<Vec<u8>, WireError> {
    let payload = msg.encode_payload()?;
    encode_message(&Header::new(msg.msg_type(), session_id, timestep, flags), &payload)
}

/// Parse one complete message into header and typed body.
pub fn decode(bytes: &[u8]) -> Result<(Header, Message), WireError> {
    let (h, payload) = decode_message(bytes)?;
    let m = Message::decode_payload(h.msg_type, &payload)?;
    Ok((h, m))
}

/// FEATURE payload bytes for one timestep of a spike tensor with `numel` elements.
pub fn feature_payload_len(numel: usize) -> usize {
    FEATURE_SHAPE_LEN + packed_len(numel)
}

/// LOGITS payload bytes for `k` classes.
pub fn logits_payload_len(k: usize) -> usize {
    2 + 4 * k
}
