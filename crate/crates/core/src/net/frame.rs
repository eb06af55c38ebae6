//! Length-prefixed frames: `u32` LE payload length, then the payload
//! `msg_type (1 byte) | version (1 byte) | canonical JSON body`.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

pub const FRAME_VERSION: u8 = 0x01;
/// Largest accepted payload.
pub const MAX_FRAME: u32 = 16 * 1024 * 1024;
pub const CHUNK_SIZE: usize = 64 * 1024;

macro_rules! msg_types {
    ($($name:ident = $code:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum MsgType {
            $($name = $code),*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name),*];

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(MsgType::$name),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(MsgType::$name => stringify!($name),)*
                }
            }
        }
    };
}

msg_types! {
    Register = 1,
    Heartbeat = 2,
    QueryRequest = 3,
    SubQueryRequest = 4,
    SubQueryResult = 5,
    QueryResult = 6,
    JobSubmit = 7,
    JobStatus = 8,
    JobResult = 9,
    AnnotationPush = 10,
    SecondOpinionRequest = 11,
    FetchImage = 12,
    ImageChunk = 13,
    Ingest = 14,
    Catalogue = 15,
    Error = 255,
}

impl MsgType {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 16 MiB cap")]
    Oversize(u64),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("malformed body: {0}")]
    BadBody(String),
    #[error("connection closed")]
    Closed,
    #[error("read timed out")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(String),
}

fn io_err(e: io::Error) -> FrameError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::TruncatedFrame,
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => FrameError::Timeout,
        _ => FrameError::Io(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub msg_type: MsgType,
    pub body: Value,
}

impl Message {
    pub fn new<T: Serialize>(msg_type: MsgType, body: &T) -> Self {
        Self {
            msg_type,
            body: serde_json::to_value(body).expect("message bodies serialize"),
        }
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_value(self.body.clone()).map_err(|e| FrameError::BadBody(e.to_string()))
    }

    pub fn error(request_id: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            msg_type: MsgType::Error,
            body: json!({"request_id": request_id, "code": code, "message": message.into()}),
        }
    }

    pub fn request_id(&self) -> &str {
        self.body.get("request_id").and_then(Value::as_str).unwrap_or("")
    }

    /// Whether this frame ends a response: anything but a non-final chunk.
    pub fn is_terminal(&self) -> bool {
        self.msg_type != MsgType::ImageChunk || self.body.get("last") == Some(&Value::Bool(true))
    }
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, FrameError> {
    // serde_json maps are ordered, so the body is canonical.
    let body = serde_json::to_vec(&msg.body).map_err(|e| FrameError::BadBody(e.to_string()))?;
    let len = body.len() as u64 + 2;
    if len > MAX_FRAME as u64 {
        return Err(FrameError::Oversize(len));
    }
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(msg.msg_type.code());
    out.push(FRAME_VERSION);
    out.extend_from_slice(&body);
    Ok(out)
}

fn decode_payload(payload: &[u8]) -> Result<Message, FrameError> {
    if payload.len() < 2 {
        return Err(FrameError::TruncatedFrame);
    }
    let msg_type = MsgType::from_code(payload[0]).ok_or(FrameError::UnknownType(payload[0]))?;
    if payload[1] != FRAME_VERSION {
        return Err(FrameError::BadVersion(payload[1]));
    }
    let body = serde_json::from_slice(&payload[2..]).map_err(|e| FrameError::BadBody(e.to_string()))?;
    Ok(Message { msg_type, body })
}

fn declared_len(prefix: [u8; 4]) -> Result<usize, FrameError> {
    let len = u32::from_le_bytes(prefix);
    if len > MAX_FRAME {
        return Err(FrameError::Oversize(len as u64));
    }
    Ok(len as usize)
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let prefix: [u8; 4] = bytes
        .get(..4)
        .ok_or(FrameError::TruncatedFrame)?
        .try_into()
        .expect("4 bytes");
    let len = declared_len(prefix)?;
    let payload = bytes.get(4..4 + len).ok_or(FrameError::TruncatedFrame)?;
    Ok((decode_payload(payload)?, 4 + len))
}

/// Reads one frame. The whole frame is consumed even when its type is
/// unknown, so the stream stays aligned.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, FrameError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::TruncatedFrame),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_err(e)),
        }
    }
    let len = declared_len(prefix)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(io_err)?;
    decode_payload(&payload)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<usize, FrameError> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes).map_err(|e| FrameError::Io(e.to_string()))?;
    Ok(bytes.len())
}
