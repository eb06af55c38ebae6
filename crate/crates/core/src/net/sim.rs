//! Deterministic in-process network: a single virtual-time event loop.
//!
//! Frames are really encoded and decoded, so byte accounting and wire
//! captures match the TCP transport. Delivery order is FIFO per directed
//! link; latency jitter and random drops come from a seeded generator, so a
//! fixed seed and script reproduce the same trace bit for bit.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::frame::{decode_frame, encode_frame, Message, MsgType};
use super::{ByteCounters, NetError, Service, Transport};
use crate::digest::to_hex;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    /// Base one-way latency.
    pub latency_ms: u64,
    /// Extra latency drawn uniformly from `0..=jitter_ms`.
    pub jitter_ms: u64,
    /// Probability that any frame is lost.
    pub drop_rate: f64,
    pub start_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latency_ms: 5,
            jitter_ms: 3,
            drop_rate: 0.0,
            start_ms: 1_700_000_000_000,
        }
    }
}

pub type TimerFn = Arc<dyn Fn(&dyn Transport) + Send + Sync>;

enum Event {
    Deliver {
        from: String,
        to: String,
        frame: Vec<u8>,
        slot: u64,
        response: bool,
    },
    Tick { timer: u64, due: u64 },
}

#[derive(Default)]
struct Slot {
    frames: Vec<Message>,
    done: bool,
    error: Option<NetError>,
}

/// One frame as it crossed the simulated wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedFrame {
    pub at_ms: u64,
    pub from: String,
    pub to: String,
    pub bytes: Vec<u8>,
}

struct State {
    cfg: SimConfig,
    now: u64,
    seq: u64,
    next_slot: u64,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: BTreeMap<u64, Event>,
    link_clock: BTreeMap<(String, String), u64>,
    link_latency: BTreeMap<(String, String), u64>,
    slots: BTreeMap<u64, Slot>,
    isolated: BTreeSet<String>,
    muted: BTreeSet<String>,
    timers: BTreeMap<u64, (u64, TimerFn)>,
    counters: ByteCounters,
    trace: Sha256,
    trace_events: u64,
    capture: Option<Vec<CapturedFrame>>,
}

impl State {
    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    fn note(&mut self, line: &str, frame: &[u8]) {
        self.trace.update(line.as_bytes());
        self.trace.update((frame.len() as u64).to_le_bytes());
        self.trace.update(frame);
        self.trace_events += 1;
    }

    fn send(&mut self, from: &str, to: &str, msg: &Message, slot: u64, response: bool) {
        let frame = match encode_frame(msg) {
            Ok(f) => f,
            Err(e) if !response => {
                if let Some(s) = self.slots.get_mut(&slot) {
                    s.error = Some(NetError::Frame(e));
                    s.done = true;
                }
                return;
            }
            Err(e) => encode_frame(&Message::error(msg.request_id(), "frame", e.to_string()))
                .expect("error frames are small"),
        };
        let msg_type = MsgType::from_code(frame[4]).expect("encoded type");
        self.counters.record(from, msg_type, frame.len() as u64 - 4);
        if let Some(cap) = self.capture.as_mut() {
            cap.push(CapturedFrame {
                at_ms: self.now,
                from: from.to_string(),
                to: to.to_string(),
                bytes: frame.clone(),
            });
        }
        let lost = self.isolated.contains(from)
            || self.isolated.contains(to)
            || (msg_type == MsgType::Heartbeat && self.muted.contains(from))
            || (self.cfg.drop_rate > 0.0 && self.rng.gen_bool(self.cfg.drop_rate));
        if lost {
            let line = format!("{} drop {from}>{to}", self.now);
            self.note(&line, &frame);
            return;
        }
        let link = (from.to_string(), to.to_string());
        let latency = match self.link_latency.get(&link) {
            Some(&l) => l,
            None => self.cfg.latency_ms + self.rng.gen_range(0..=self.cfg.jitter_ms),
        };
        let at = (self.now + latency).max(self.link_clock.get(&link).copied().unwrap_or(0));
        self.link_clock.insert(link, at);
        self.schedule(
            at,
            Event::Deliver {
                from: from.to_string(),
                to: to.to_string(),
                frame,
                slot,
                response,
            },
        );
    }
}

pub struct SimNet {
    state: Mutex<State>,
    services: Mutex<BTreeMap<String, Arc<dyn Service>>>,
}

impl SimNet {
    pub fn new(cfg: SimConfig) -> Self {
        Self {
            state: Mutex::new(State {
                now: cfg.start_ms,
                rng: ChaCha8Rng::seed_from_u64(cfg.seed),
                cfg,
                seq: 0,
                next_slot: 0,
                queue: BinaryHeap::new(),
                events: BTreeMap::new(),
                link_clock: BTreeMap::new(),
                link_latency: BTreeMap::new(),
                slots: BTreeMap::new(),
                isolated: BTreeSet::new(),
                muted: BTreeSet::new(),
                timers: BTreeMap::new(),
                counters: ByteCounters::default(),
                trace: Sha256::new(),
                trace_events: 0,
                capture: None,
            }),
            services: Mutex::new(BTreeMap::new()),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add_service(&self, addr: &str, service: Arc<dyn Service>) {
        self.services.lock().unwrap().insert(addr.to_string(), service);
    }

    /// Takes a service off the network, as if its process had exited.
    pub fn remove_service(&self, addr: &str) -> Option<Arc<dyn Service>> {
        self.services.lock().unwrap().remove(addr)
    }

    /// Drops every frame to or from `addr` until healed.
    pub fn isolate(&self, addr: &str) {
        self.lock().isolated.insert(addr.to_string());
    }

    pub fn heal(&self, addr: &str) {
        let mut s = self.lock();
        s.isolated.remove(addr);
        s.muted.remove(addr);
    }

    /// Drops only the heartbeats `addr` sends.
    pub fn silence_heartbeats(&self, addr: &str) {
        self.lock().muted.insert(addr.to_string());
    }

    /// Fixes the latency of one directed link, overriding jitter.
    pub fn set_link_latency(&self, from: &str, to: &str, ms: u64) {
        self.lock().link_latency.insert((from.to_string(), to.to_string()), ms);
    }

    /// Calls `f` every `period_ms`, first after `first_after_ms`.
    pub fn every(&self, first_after_ms: u64, period_ms: u64, f: TimerFn) -> u64 {
        let mut s = self.lock();
        s.next_slot += 1;
        let id = s.next_slot;
        s.timers.insert(id, (period_ms.max(1), f));
        let at = s.now + first_after_ms;
        s.schedule(at, Event::Tick { timer: id, due: at });
        id
    }

    pub fn cancel_timer(&self, id: u64) {
        self.lock().timers.remove(&id);
    }

    pub fn enable_capture(&self) {
        self.lock().capture.get_or_insert_with(Vec::new);
    }

    pub fn take_capture(&self) -> Vec<CapturedFrame> {
        self.lock().capture.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Digest over every delivery and drop so far.
    pub fn trace_digest(&self) -> String {
        to_hex(&self.lock().trace.clone().finalize())
    }

    pub fn trace_events(&self) -> u64 {
        self.lock().trace_events
    }

    pub fn reset_counters(&self) {
        self.lock().counters.reset();
    }

    /// Runs the event loop for `ms` of virtual time.
    pub fn advance(&self, ms: u64) {
        let deadline = self.lock().now + ms;
        self.run_until(deadline, &[]);
    }

    /// Processes events up to `deadline` or until every slot in `wait` is
    /// complete.
    fn run_until(&self, deadline: u64, wait: &[u64]) {
        loop {
            let event = {
                let mut s = self.lock();
                if !wait.is_empty() && wait.iter().all(|id| s.slots.get(id).is_none_or(|x| x.done)) {
                    return;
                }
                match s.queue.peek() {
                    Some(Reverse((at, _))) if *at <= deadline => {
                        let Reverse((at, seq)) = s.queue.pop().expect("peeked");
                        s.now = s.now.max(at);
                        s.events.remove(&seq)
                    }
                    _ => {
                        s.now = s.now.max(deadline);
                        return;
                    }
                }
            };
            if let Some(event) = event {
                self.process(event);
            }
        }
    }

    fn process(&self, event: Event) {
        match event {
            Event::Tick { timer, due } => {
                let entry = self.lock().timers.get(&timer).cloned();
                if let Some((period, f)) = entry {
                    f(self);
                    let mut s = self.lock();
                    if s.timers.contains_key(&timer) {
                        // Keep the schedule fixed even if the callback advanced time.
                        let at = (due + period).max(s.now);
                        s.schedule(at, Event::Tick { timer, due: at });
                    }
                }
            }
            Event::Deliver {
                from,
                to,
                frame,
                slot,
                response,
            } => {
                {
                    let mut s = self.lock();
                    let line = format!("{} {from}>{to}", s.now);
                    s.note(&line, &frame);
                }
                let decoded = decode_frame(&frame).map(|(m, _)| m);
                if response {
                    let mut s = self.lock();
                    if let Some(sl) = s.slots.get_mut(&slot) {
                        match decoded {
                            Ok(m) => {
                                sl.done |= m.is_terminal();
                                sl.frames.push(m);
                            }
                            Err(e) => {
                                sl.error = Some(NetError::Frame(e));
                                sl.done = true;
                            }
                        }
                    }
                    return;
                }
                let service = self.services.lock().unwrap().get(&to).cloned();
                let Some(service) = service else {
                    let mut s = self.lock();
                    if let Some(sl) = s.slots.get_mut(&slot) {
                        sl.error = Some(NetError::Unreachable(to));
                        sl.done = true;
                    }
                    return;
                };
                let replies = match decoded {
                    Ok(m) => service.handle(&from, m, self),
                    Err(e) => vec![Message::error("", "bad_frame", e.to_string())],
                };
                let mut s = self.lock();
                for r in &replies {
                    s.send(&to, &from, r, slot, true);
                }
            }
        }
    }
}

impl Transport for SimNet {
    fn now_ms(&self) -> u64 {
        self.lock().now
    }

    fn exchange(&self, from: &str, requests: Vec<(String, Message)>, timeout_ms: u64) -> Vec<Result<Vec<Message>, NetError>> {
        let (ids, deadline) = {
            let mut s = self.lock();
            let mut ids = Vec::with_capacity(requests.len());
            for (to, msg) in &requests {
                s.next_slot += 1;
                let id = s.next_slot;
                s.slots.insert(id, Slot::default());
                s.send(from, to, msg, id, false);
                ids.push(id);
            }
            (ids, s.now + timeout_ms)
        };
        self.run_until(deadline, &ids);
        let mut s = self.lock();
        ids.iter()
            .map(|id| {
                let slot = s.slots.remove(id).unwrap_or_default();
                match (slot.error, slot.done) {
                    (Some(e), _) => Err(e),
                    (None, true) => Ok(slot.frames),
                    (None, false) => Err(NetError::Timeout),
                }
            })
            .collect()
    }

    fn counters(&self) -> ByteCounters {
        self.lock().counters.clone()
    }
}
