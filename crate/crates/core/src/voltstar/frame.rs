//! Wire frames between Transfer Units and the Master Unit.
//!
//! ```text
//! magic "VSTR" | version u8 = 1 | msg_type u8 | unit_id u16 BE
//! | name_len u16 BE | name UTF-8 | payload_len u32 BE | payload
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::detector::{AnomalyKind, AnomalyReport};

pub const MAGIC: [u8; 4] = *b"VSTR";
pub const VERSION: u8 = 1;
/// Bytes before the name: magic, version, type, unit id, name length.
pub const FIXED_HEADER_LEN: usize = 10;
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame declares {declared} bytes but buffer holds {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("name of {0} bytes exceeds 65535")]
    NameTooLong(usize),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(usize),
    #[error("name is not valid UTF-8")]
    InvalidName,
    #[error("malformed {0} payload")]
    BadPayload(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    File = 1,
    Ack = 2,
    FaultBroadcast = 3,
    RegisterTu = 4,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        match v {
            1 => Ok(MsgType::File),
            2 => Ok(MsgType::Ack),
            3 => Ok(MsgType::FaultBroadcast),
            4 => Ok(MsgType::RegisterTu),
            other => Err(FrameError::UnknownMsgType(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub unit_id: u16,
    pub name: String,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, unit_id: u16, name: impl Into<String>, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            unit_id,
            name: name.into(),
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + self.name.len() + 4 + self.payload.len()
    }

    fn header(&self) -> Result<Vec<u8>, FrameError> {
        let name_len =
            u16::try_from(self.name.len()).map_err(|_| FrameError::NameTooLong(self.name.len()))?;
        let payload_len = u32::try_from(self.payload.len())
            .map_err(|_| FrameError::PayloadTooLarge(self.payload.len()))?;
        let mut out = Vec::with_capacity(FIXED_HEADER_LEN + self.name.len() + 4);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.unit_id.to_be_bytes());
        out.extend_from_slice(&name_len.to_be_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.extend_from_slice(&payload_len.to_be_bytes());
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let mut out = self.header()?;
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let need = |needed: usize| {
            if bytes.len() < needed {
                Err(FrameError::Truncated {
                    needed,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let (msg_type, unit_id, name_len) = parse_fixed(bytes[..FIXED_HEADER_LEN.min(bytes.len())].try_into().ok(), bytes)?;
        let name_end = FIXED_HEADER_LEN + name_len;
        need(name_end + 4)?;
        let name = std::str::from_utf8(&bytes[FIXED_HEADER_LEN..name_end])
            .map_err(|_| FrameError::InvalidName)?
            .to_string();
        let payload_len =
            u32::from_be_bytes(bytes[name_end..name_end + 4].try_into().unwrap()) as usize;
        let total = name_end + 4 + payload_len;
        need(total)?;
        if bytes.len() != total {
            return Err(FrameError::LengthMismatch {
                declared: total,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            msg_type,
            unit_id,
            name,
            payload: bytes[name_end + 4..].to_vec(),
        })
    }
}

/// Validates the fixed header. `fixed` is `None` when fewer than
/// [`FIXED_HEADER_LEN`] bytes are available; magic and version are still
/// checked first so corruption is reported ahead of truncation.
fn parse_fixed(
    fixed: Option<&[u8; FIXED_HEADER_LEN]>,
    raw: &[u8],
) -> Result<(MsgType, u16, usize), FrameError> {
    let magic: [u8; 4] = raw[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if let Some(&v) = raw.get(4) {
        if v != VERSION {
            return Err(FrameError::BadVersion(v));
        }
    }
    let fixed = fixed.ok_or(FrameError::Truncated {
        needed: FIXED_HEADER_LEN,
        have: raw.len(),
    })?;
    let msg_type = MsgType::try_from(fixed[5])?;
    let unit_id = u16::from_be_bytes([fixed[6], fixed[7]]);
    let name_len = usize::from(u16::from_be_bytes([fixed[8], fixed[9]]));
    Ok((msg_type, unit_id, name_len))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    // Header and payload are written separately to avoid copying large payloads.
    w.write_all(&frame.header()?)?;
    w.write_all(&frame.payload)?;
    w.flush()?;
    Ok(())
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], already: usize) -> Result<bool, FrameError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 && already == 0 => return Ok(false),
            Ok(0) => {
                return Err(FrameError::Truncated {
                    needed: already + buf.len(),
                    have: already + filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Reads one frame from a stream. Returns `Ok(None)` on a clean EOF between frames.
pub fn read_frame<R: Read>(r: &mut R, max_payload: usize) -> Result<Option<Frame>, FrameError> {
    let mut fixed = [0u8; FIXED_HEADER_LEN];
    if !read_full(r, &mut fixed, 0)? {
        return Ok(None);
    }
    let (msg_type, unit_id, name_len) = parse_fixed(Some(&fixed), &fixed)?;
    let mut rest = vec![0u8; name_len + 4];
    read_full(r, &mut rest, FIXED_HEADER_LEN)?;
    let name = String::from_utf8(rest[..name_len].to_vec()).map_err(|_| FrameError::InvalidName)?;
    let payload_len = u32::from_be_bytes(rest[name_len..].try_into().unwrap()) as usize;
    if payload_len > max_payload {
        return Err(FrameError::PayloadTooLarge(payload_len));
    }
    let mut payload = vec![0u8; payload_len];
    read_full(r, &mut payload, FIXED_HEADER_LEN + name_len + 4)?;
    Ok(Some(Frame {
        msg_type,
        unit_id,
        name,
        payload,
    }))
}

/// ACK payload: status byte (0 = ok, 1 = error) followed by a UTF-8 message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ack {
    Ok,
    Error(String),
}

impl Ack {
    pub fn to_frame(&self, unit_id: u16, name: &str) -> Frame {
        let payload = match self {
            Ack::Ok => vec![0],
            Ack::Error(msg) => {
                let mut p = vec![1];
                p.extend_from_slice(msg.as_bytes());
                p
            }
        };
        Frame::new(MsgType::Ack, unit_id, name, payload)
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, FrameError> {
        match (frame.msg_type, frame.payload.split_first()) {
            (MsgType::Ack, Some((0, []))) => Ok(Ack::Ok),
            (MsgType::Ack, Some((1, msg))) => Ok(Ack::Error(String::from_utf8_lossy(msg).into_owned())),
            _ => Err(FrameError::BadPayload("ACK")),
        }
    }
}

/// FAULT_BROADCAST: unit id and file name ride in the header; the payload is
/// `window_index u64 | kind u8 | rms f64 bits u64 | detected_at_us u64`.
pub fn fault_frame(report: &AnomalyReport) -> Frame {
    let mut payload = Vec::with_capacity(25);
    payload.extend_from_slice(&report.window_index.to_be_bytes());
    payload.push(report.kind.as_u8());
    payload.extend_from_slice(&report.rms_value.to_bits().to_be_bytes());
    payload.extend_from_slice(&report.detected_at_us.to_be_bytes());
    Frame::new(MsgType::FaultBroadcast, report.unit_id, report.file_name.clone(), payload)
}

pub fn report_from_frame(frame: &Frame) -> Result<AnomalyReport, FrameError> {
    let p = &frame.payload;
    if frame.msg_type != MsgType::FaultBroadcast || p.len() != 25 {
        return Err(FrameError::BadPayload("FAULT_BROADCAST"));
    }
    let u64_at = |i: usize| u64::from_be_bytes(p[i..i + 8].try_into().unwrap());
    Ok(AnomalyReport {
        unit_id: frame.unit_id,
        file_name: frame.name.clone(),
        window_index: u64_at(0),
        kind: AnomalyKind::from_u8(p[8]).ok_or(FrameError::BadPayload("FAULT_BROADCAST"))?,
        rms_value: f64::from_bits(u64_at(9)),
        detected_at_us: u64_at(17),
    })
}
