//! Coordinator/worker wire protocol.
//!
//! Every frame is little-endian:
//!
//! ```text
//! u32 length | u8 type | u32 crc32(payload) | payload[length]
//! ```
//! `length` counts payload bytes only. Payloads by type:
//!
//! | type | message      | payload                                                     |
//! |------|--------------|-------------------------------------------------------------|
//! | 1    | Hello        | u32 version, [u8; 32] config hash                           |
//! | 2    | HelloAck     | u32 version, [u8; 32] config hash, u32 worker id            |
//! | 3    | EvalJob      | u64 generation, u32 index, u64 candidate seed, [u8; 32] hash |
//! | 4    | RewardReport | u64 generation, u32 index, f64 reward, u64 eval ms, u32 worker id |
//! | 5    | Shutdown     | empty                                                       |
//! | 6    | JobError     | u64 generation, u32 index, u32 worker id, u8 code, u16 len + UTF-8 message |
//!
//! RewardReports also flow from the coordinator to workers: after each
//! generation the coordinator broadcasts all rewards so that every worker
//! can apply the same distribution update to its replica. Those reports
//! carry [`COORDINATOR_ID`] as the worker id.

use std::io::Read;

use thiserror::Error;

use crate::codec::{Reader, Writer};

pub const PROTOCOL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 9;
/// Upper bound on accepted payload length.
pub const MAX_PAYLOAD: u32 = 1 << 16;
/// Worker id used on reports sent by the coordinator.
pub const COORDINATOR_ID: u32 = u32::MAX;

pub type ConfigHash = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalJob {
    pub generation: u64,
    pub index: u32,
    pub seed: u64,
    pub config_hash: ConfigHash,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardReport {
    pub generation: u64,
    pub index: u32,
    pub reward: f64,
    pub eval_millis: u64,
    pub worker_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JobErrorKind {
    ConfigMismatch = 1,
    EvaluationFailed = 2,
    Desync = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobError {
    pub generation: u64,
    pub index: u32,
    pub worker_id: u32,
    pub kind: JobErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u32, config_hash: ConfigHash },
    HelloAck { version: u32, config_hash: ConfigHash, worker_id: u32 },
    EvalJob(EvalJob),
    RewardReport(RewardReport),
    Shutdown,
    JobError(JobError),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::HelloAck { .. } => 2,
            Message::EvalJob(_) => 3,
            Message::RewardReport(_) => 4,
            Message::Shutdown => 5,
            Message::JobError(_) => 6,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Hello { version, config_hash } => {
                w.u32(*version);
                w.bytes(config_hash);
            }
            Message::HelloAck {
                version,
                config_hash,
                worker_id,
            } => {
                w.u32(*version);
                w.bytes(config_hash);
                w.u32(*worker_id);
            }
            Message::EvalJob(j) => {
                w.u64(j.generation);
                w.u32(j.index);
                w.u64(j.seed);
                w.bytes(&j.config_hash);
            }
            Message::RewardReport(r) => {
                w.u64(r.generation);
                w.u32(r.index);
                w.f64(r.reward);
                w.u64(r.eval_millis);
                w.u32(r.worker_id);
            }
            Message::Shutdown => {}
            Message::JobError(e) => {
                w.u64(e.generation);
                w.u32(e.index);
                w.u32(e.worker_id);
                w.u8(e.kind as u8);
                w.str16(&e.message);
            }
        }
        w.finish()
    }

    /// Full frame: header followed by the payload.
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.push(self.type_code());
        frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        frame.extend_from_slice(&payload);
        frame
    }

    /// Decodes exactly one frame occupying all of `frame`.
    pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
        if frame.len() < HEADER_LEN {
            return Err(WireError::Truncated);
        }
        let len = u32::from_le_bytes(frame[0..4].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(len));
        }
        let payload = &frame[HEADER_LEN..];
        if payload.len() != len as usize {
            return Err(WireError::Truncated);
        }
        let crc = u32::from_le_bytes(frame[5..9].try_into().unwrap());
        if crc32fast::hash(payload) != crc {
            return Err(WireError::Checksum);
        }
        let malformed = |e: crate::codec::DecodeError| WireError::Malformed(e.to_string());
        let mut r = Reader::new(payload);
        let hash = |r: &mut Reader| -> Result<ConfigHash, WireError> {
            Ok(r.take(32).map_err(malformed)?.try_into().unwrap())
        };
        let msg = match frame[4] {
            1 => Message::Hello {
                version: r.u32().map_err(malformed)?,
                config_hash: hash(&mut r)?,
            },
            2 => Message::HelloAck {
                version: r.u32().map_err(malformed)?,
                config_hash: hash(&mut r)?,
                worker_id: r.u32().map_err(malformed)?,
            },
            3 => Message::EvalJob(EvalJob {
                generation: r.u64().map_err(malformed)?,
                index: r.u32().map_err(malformed)?,
                seed: r.u64().map_err(malformed)?,
                config_hash: hash(&mut r)?,
            }),
            4 => Message::RewardReport(RewardReport {
                generation: r.u64().map_err(malformed)?,
                index: r.u32().map_err(malformed)?,
                reward: r.f64().map_err(malformed)?,
                eval_millis: r.u64().map_err(malformed)?,
                worker_id: r.u32().map_err(malformed)?,
            }),
            5 => Message::Shutdown,
            6 => {
                let generation = r.u64().map_err(malformed)?;
                let index = r.u32().map_err(malformed)?;
                let worker_id = r.u32().map_err(malformed)?;
                let kind = match r.u8().map_err(malformed)? {
                    1 => JobErrorKind::ConfigMismatch,
                    2 => JobErrorKind::EvaluationFailed,
                    3 => JobErrorKind::Desync,
                    other => return Err(WireError::Malformed(format!("job error code {other}"))),
                };
                Message::JobError(JobError {
                    generation,
                    index,
                    worker_id,
                    kind,
                    message: r.str16().map_err(malformed)?,
                })
            }
            other => return Err(WireError::UnknownType(other)),
        };
        r.expect_end().map_err(malformed)?;
        Ok(msg)
    }
}

/// Reads one raw frame (header and payload) from a byte stream. Returns
/// `Ok(None)` on a clean end of stream before the first header byte.
pub fn read_frame(stream: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match stream.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::Io(e.to_string())),
        }
    }
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + len as usize, 0);
    stream.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e.to_string()),
    })?;
    Ok(Some(frame))
}
