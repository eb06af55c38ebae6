//! Real sockets: one short-lived connection per request on the client side,
//! one handler thread per connection on the server side.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, warn};

use super::frame::{encode_frame, read_frame, FrameError, Message, MsgType};
use super::{ByteCounters, NetError, Service, Transport};

#[derive(Default)]
pub struct TcpTransport {
    counters: Mutex<ByteCounters>,
}

fn io_error(e: io::Error, addr: &str) -> NetError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => NetError::Timeout,
        io::ErrorKind::ConnectionRefused | io::ErrorKind::NotFound | io::ErrorKind::AddrNotAvailable => {
            NetError::Unreachable(addr.to_string())
        }
        _ => NetError::Frame(FrameError::Io(e.to_string())),
    }
}

impl TcpTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn count(&self, sender: &str, frame: &[u8]) {
        if let Some(t) = MsgType::from_code(frame[4]) {
            self.counters.lock().unwrap().record(sender, t, frame.len() as u64 - 4);
        }
    }

    fn send_frame<W: Write>(&self, sender: &str, w: &mut W, msg: &Message) -> Result<(), NetError> {
        let frame = encode_frame(msg)?;
        w.write_all(&frame).map_err(|e| NetError::Frame(FrameError::Io(e.to_string())))?;
        self.count(sender, &frame);
        Ok(())
    }

    fn one(&self, from: &str, addr: &str, msg: &Message, deadline: Instant) -> Result<Vec<Message>, NetError> {
        let remaining = || {
            deadline
                .checked_duration_since(Instant::now())
                .filter(|d| !d.is_zero())
                .ok_or(NetError::Timeout)
        };
        let target: SocketAddr = addr
            .to_socket_addrs()
            .map_err(|e| io_error(e, addr))?
            .next()
            .ok_or_else(|| NetError::Unreachable(addr.to_string()))?;
        let stream = TcpStream::connect_timeout(&target, remaining()?).map_err(|e| io_error(e, addr))?;
        stream.set_nodelay(true).ok();
        let mut w = BufWriter::new(stream.try_clone().map_err(|e| io_error(e, addr))?);
        stream.set_write_timeout(Some(remaining()?)).ok();
        self.send_frame(from, &mut w, msg)?;
        w.flush().map_err(|e| io_error(e, addr))?;
        let mut r = BufReader::new(stream);
        let mut frames = Vec::new();
        loop {
            r.get_ref().set_read_timeout(Some(remaining()?)).map_err(|e| io_error(e, addr))?;
            let m = read_frame(&mut r).map_err(|e| match e {
                FrameError::Timeout => NetError::Timeout,
                other => NetError::Frame(other),
            })?;
            let done = m.is_terminal();
            frames.push(m);
            if done {
                return Ok(frames);
            }
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Transport for TcpTransport {
    fn now_ms(&self) -> u64 {
        now_ms()
    }

    fn exchange(&self, from: &str, requests: Vec<(String, Message)>, timeout_ms: u64) -> Vec<Result<Vec<Message>, NetError>> {
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        if requests.len() == 1 {
            let (addr, msg) = &requests[0];
            return vec![self.one(from, addr, msg, deadline)];
        }
        thread::scope(|s| {
            let handles: Vec<_> = requests
                .iter()
                .map(|(addr, msg)| s.spawn(move || self.one(from, addr, msg, deadline)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(Err(NetError::Timeout)))
                .collect()
        })
    }

    fn counters(&self) -> ByteCounters {
        self.counters.lock().unwrap().clone()
    }
}

/// A running listener; dropping it stops accepting connections.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle_connection(stream: TcpStream, name: &str, service: &dyn Service, net: &TcpTransport) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let Ok(write_half) = stream.try_clone() else { return };
    let mut r = BufReader::new(stream);
    let mut w = BufWriter::new(write_half);
    loop {
        let replies = match read_frame(&mut r) {
            Ok(msg) => service.handle(&peer, msg, net),
            Err(FrameError::Closed) => return,
            Err(e @ (FrameError::UnknownType(_) | FrameError::BadVersion(_) | FrameError::BadBody(_))) => {
                debug!("{name}: rejected frame from {peer}: {e}");
                vec![Message::error("", "bad_frame", e.to_string())]
            }
            Err(e @ FrameError::Oversize(_)) => {
                // The payload was not read, so the stream cannot be resynchronised.
                let _ = net.send_frame(name, &mut w, &Message::error("", "oversize", e.to_string()));
                let _ = w.flush();
                return;
            }
            Err(e) => {
                debug!("{name}: connection from {peer} ended: {e}");
                return;
            }
        };
        for m in &replies {
            if net.send_frame(name, &mut w, m).is_err() {
                return;
            }
        }
        if w.flush().is_err() {
            return;
        }
    }
}

/// Serves `service` on `addr` until the handle is shut down. Bind to port 0
/// and read [`ServerHandle::local_addr`] to pick a free port.
pub fn serve(addr: &str, name: &str, service: Arc<dyn Service>, net: Arc<TcpTransport>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let name = name.to_string();
    let thread = thread::Builder::new().name(format!("{name}-accept")).spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    stream.set_nodelay(true).ok();
                    let (service, net, name) = (service.clone(), net.clone(), name.clone());
                    let spawned = thread::Builder::new()
                        .name(format!("{name}-conn"))
                        .spawn(move || handle_connection(stream, &name, &*service, &net));
                    if let Err(e) = spawned {
                        warn!("cannot spawn connection handler: {e}");
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!("{name}: accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    })?;
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

#[cfg(test)]
mod tests {
    use std::io::Read;

    use serde_json::json;

    use super::*;

    struct Chunky;

    impl Service for Chunky {
        fn handle(&self, _: &str, msg: Message, _: &dyn Transport) -> Vec<Message> {
            let n = msg.body["chunks"].as_u64().unwrap_or(0);
            if n == 0 {
                return vec![Message::new(MsgType::QueryResult, &json!({"echo": msg.body}))];
            }
            (0..n)
                .map(|i| Message::new(MsgType::ImageChunk, &json!({"seq": i, "last": i + 1 == n})))
                .collect()
        }
    }

    fn server() -> (ServerHandle, Arc<TcpTransport>) {
        let net = Arc::new(TcpTransport::new());
        let h = serve("127.0.0.1:0", "srv", Arc::new(Chunky), net.clone()).unwrap();
        (h, net)
    }

    #[test]
    fn request_response_and_chunk_stream() {
        let (h, net) = server();
        let addr = h.local_addr().to_string();
        let r = net
            .request("cli", &addr, Message::new(MsgType::QueryRequest, &json!({"x": 1})), 5000)
            .unwrap();
        assert_eq!(r[0].body["echo"]["x"], 1);
        let r = net
            .request("cli", &addr, Message::new(MsgType::FetchImage, &json!({"chunks": 4})), 5000)
            .unwrap();
        assert_eq!(r.len(), 4);
        let c = net.counters();
        assert_eq!(c.get(MsgType::ImageChunk).frames, 4);
        assert_eq!(c.per_sender["srv"]["ImageChunk"].frames, 4);
    }

    #[test]
    fn parallel_exchange_and_unreachable_peer() {
        let (h, net) = server();
        let addr = h.local_addr().to_string();
        let dead = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let reqs = vec![
            (addr.clone(), Message::new(MsgType::QueryRequest, &json!({"i": 1}))),
            (dead.clone(), Message::new(MsgType::QueryRequest, &json!({}))),
            (addr, Message::new(MsgType::QueryRequest, &json!({"i": 2}))),
        ];
        let r = net.exchange("cli", reqs, 3000);
        assert_eq!(r[0].as_ref().unwrap()[0].body["echo"]["i"], 1);
        assert!(matches!(r[1], Err(NetError::Unreachable(_))));
        assert_eq!(r[2].as_ref().unwrap()[0].body["echo"]["i"], 2);
    }

    #[test]
    fn unknown_type_gets_error_and_connection_survives() {
        let (h, _net) = server();
        let mut s = TcpStream::connect(h.local_addr()).unwrap();
        s.write_all(b"\x04\x00\x00\x00\x63\x01{}").unwrap();
        let reply = read_frame(&mut s).unwrap();
        assert_eq!(reply.msg_type, MsgType::Error);
        assert_eq!(reply.body["code"], "bad_frame");
        let ok = encode_frame(&Message::new(MsgType::QueryRequest, &json!({"y": 2}))).unwrap();
        s.write_all(&ok).unwrap();
        assert_eq!(read_frame(&mut s).unwrap().body["echo"]["y"], 2);
    }

    #[test]
    fn oversize_frame_is_refused_without_reading_it() {
        let (h, _net) = server();
        let mut s = TcpStream::connect(h.local_addr()).unwrap();
        s.write_all(&[0xff, 0xff, 0xff, 0xff, 2, 1]).unwrap();
        let reply = read_frame(&mut s).unwrap();
        assert_eq!(reply.body["code"], "oversize");
        let mut rest = Vec::new();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        assert_eq!(s.read_to_end(&mut rest).unwrap(), 0);
    }

    #[test]
    fn silent_peer_times_out() {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let net = TcpTransport::new();
        let start = Instant::now();
        let r = net.request("cli", &addr, Message::new(MsgType::QueryRequest, &json!({})), 200);
        assert_eq!(r, Err(NetError::Timeout));
        assert!(start.elapsed() < Duration::from_secs(3));
        drop(l);
    }
}
