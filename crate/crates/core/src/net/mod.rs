//! Wire protocol, VO registry and the two transports (simulated and TCP).

pub mod frame;
pub mod registry;
pub mod sim;
pub mod tcp;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, FrameError, Message, MsgType, CHUNK_SIZE, MAX_FRAME,
};
pub use registry::{NodeEntry, NodeInfo, NodeState, Registry, RegistryError, VoMembership};
pub use sim::{SimConfig, SimNet};
pub use tcp::{serve, ServerHandle, TcpTransport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("timed out")]
    Timeout,
    #[error("{0} unreachable")]
    Unreachable(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Moves request frames to peers and collects their responses.
pub trait Transport: Send + Sync {
    /// Milliseconds since the epoch; virtual in the simulator.
    fn now_ms(&self) -> u64;

    /// Sends every request concurrently and waits up to `timeout_ms` for each
    /// one's response frames (a response ends with its terminal frame).
    fn exchange(
        &self,
        from: &str,
        requests: Vec<(String, Message)>,
        timeout_ms: u64,
    ) -> Vec<Result<Vec<Message>, NetError>>;

    /// Snapshot of the frames sent so far.
    fn counters(&self) -> ByteCounters;

    fn now_secs(&self) -> u64 {
        self.now_ms() / 1000
    }

    fn request(&self, from: &str, to: &str, msg: Message, timeout_ms: u64) -> Result<Vec<Message>, NetError> {
        self.exchange(from, vec![(to.to_string(), msg)], timeout_ms)
            .pop()
            .expect("one result per request")
    }
}

/// A request handler bound to an address.
pub trait Service: Send + Sync {
    fn handle(&self, from: &str, msg: Message, net: &dyn Transport) -> Vec<Message>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TypeCount {
    pub frames: u64,
    /// Bytes after the length prefix.
    pub payload_bytes: u64,
}

/// Frames and payload bytes sent, per message type and per sender.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ByteCounters {
    pub per_type: BTreeMap<&'static str, TypeCount>,
    pub per_sender: BTreeMap<String, BTreeMap<&'static str, TypeCount>>,
}

impl ByteCounters {
    pub fn record(&mut self, sender: &str, msg_type: MsgType, payload_bytes: u64) {
        for slot in [
            self.per_type.entry(msg_type.name()).or_default(),
            self.per_sender
                .entry(sender.to_string())
                .or_default()
                .entry(msg_type.name())
                .or_default(),
        ] {
            slot.frames += 1;
            slot.payload_bytes += payload_bytes;
        }
    }

    pub fn get(&self, msg_type: MsgType) -> TypeCount {
        self.per_type.get(msg_type.name()).copied().unwrap_or_default()
    }

    pub fn total_payload(&self) -> u64 {
        self.per_type.values().map(|c| c.payload_bytes).sum()
    }

    pub fn total_frames(&self) -> u64 {
        self.per_type.values().map(|c| c.frames).sum()
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &ByteCounters) -> ByteCounters {
        let diff = |now: &BTreeMap<&'static str, TypeCount>, then: Option<&BTreeMap<&'static str, TypeCount>>| {
            now.iter()
                .filter_map(|(k, v)| {
                    let before = then.and_then(|t| t.get(k)).copied().unwrap_or_default();
                    let d = TypeCount {
                        frames: v.frames - before.frames,
                        payload_bytes: v.payload_bytes - before.payload_bytes,
                    };
                    (d.frames > 0).then_some((*k, d))
                })
                .collect::<BTreeMap<_, _>>()
        };
        ByteCounters {
            per_type: diff(&self.per_type, Some(&earlier.per_type)),
            per_sender: self
                .per_sender
                .iter()
                .map(|(s, m)| (s.clone(), diff(m, earlier.per_sender.get(s))))
                .filter(|(_, m)| !m.is_empty())
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        *self = ByteCounters::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_accumulate_and_diff() {
        let mut c = ByteCounters::default();
        c.record("a", MsgType::Heartbeat, 21);
        let before = c.clone();
        c.record("a", MsgType::Heartbeat, 21);
        c.record("b", MsgType::ImageChunk, 100);
        assert_eq!(c.get(MsgType::Heartbeat), TypeCount { frames: 2, payload_bytes: 42 });
        assert_eq!(c.total_payload(), 142);
        let d = c.since(&before);
        assert_eq!(d.total_frames(), 2);
        assert_eq!(d.per_sender["b"]["ImageChunk"].payload_bytes, 100);
        c.reset();
        assert_eq!(c.total_frames(), 0);
    }
}
