//! Long-running central and Grid-box daemons over TCP.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{error, info, warn};
use thiserror::Error;

use mgvo_core::net::{serve, Message, ServerHandle, Service, TcpTransport, Transport};
use mgvo_core::node::{Central, ErrorCode, GridBox, GridBoxConfig, ServiceError};
use mgvo_core::store::{LocalStore, StoreError};

use crate::config::{CentralConfig, NodeConfig};

pub const REGISTER_ATTEMPTS: u32 = 5;
const FIRST_BACKOFF_MS: u64 = 200;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("cannot open store: {0}")]
    Store(#[from] StoreError),
    #[error("registration failed after {attempts} attempts: {last}")]
    Registration { attempts: u32, last: ServiceError },
}

/// Service placeholder filled once the Grid-box knows its bound address.
#[derive(Default)]
struct Deferred(OnceLock<Arc<dyn Service>>);

impl Service for Deferred {
    fn handle(&self, from: &str, msg: Message, net: &dyn Transport) -> Vec<Message> {
        match self.0.get() {
            Some(s) => s.handle(from, msg, net),
            None => vec![ServiceError::new(ErrorCode::Unavailable, "node is starting").to_message(msg.request_id())],
        }
    }
}

pub struct RunningCentral {
    pub central: Arc<Central>,
    server: ServerHandle,
}

impl RunningCentral {
    pub fn addr(&self) -> String {
        self.server.local_addr().to_string()
    }

    pub fn shutdown(mut self) {
        self.server.shutdown();
        info!("central node stopped");
    }
}

pub fn start_central(cfg: &CentralConfig) -> Result<RunningCentral, DaemonError> {
    let central = Arc::new(Central::new(cfg.central_secret.as_bytes(), cfg.heartbeat_interval_ms));
    let server = serve(&cfg.listen, "central", central.clone(), Arc::new(TcpTransport::new())).map_err(|source| {
        DaemonError::Bind {
            addr: cfg.listen.clone(),
            source,
        }
    })?;
    info!("central node listening on {}", server.local_addr());
    Ok(RunningCentral { central, server })
}

pub struct RunningNode {
    pub gridbox: Arc<GridBox>,
    server: ServerHandle,
    stop: Arc<AtomicBool>,
    heartbeat: Option<JoinHandle<()>>,
}

impl RunningNode {
    pub fn addr(&self) -> String {
        self.server.local_addr().to_string()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.heartbeat.take() {
            let _ = h.join();
        }
        self.server.shutdown();
        if let Err(e) = self.gridbox.store().sync() {
            error!("{}: flushing store failed: {e}", self.gridbox.node_id());
        }
        info!("{} stopped", self.gridbox.node_id());
        log::logger().flush();
    }
}

/// Replays the store, binds, registers (with backoff) and starts heartbeats.
pub fn start_node(cfg: &NodeConfig) -> Result<RunningNode, DaemonError> {
    let store = LocalStore::open(&cfg.data_dir, &cfg.node_id)?;
    info!(
        "{}: store replayed, {} catalogue entries",
        cfg.node_id,
        store.catalogue().len()
    );
    let net = Arc::new(TcpTransport::new());
    let slot = Arc::new(Deferred::default());
    let mut server = serve(&cfg.listen, &cfg.node_id, slot.clone(), net.clone()).map_err(|source| {
        DaemonError::Bind {
            addr: cfg.listen.clone(),
            source,
        }
    })?;
    let address = cfg
        .advertise
        .clone()
        .unwrap_or_else(|| server.local_addr().to_string());
    let gridbox = Arc::new(GridBox::new(
        GridBoxConfig {
            node_id: cfg.node_id.clone(),
            site_id: cfg.site_id.clone(),
            address,
            central: cfg.central.clone(),
            node_secret: cfg.node_secret.as_bytes().to_vec(),
            central_secret: cfg.central_secret.as_bytes().to_vec(),
            node_token: cfg.token.clone(),
            heartbeat_interval_ms: cfg.heartbeat_interval_ms,
            query_timeout_ms: cfg.query_timeout_ms,
        },
        store,
    ));
    let _ = slot.0.set(gridbox.clone());

    let mut last = None;
    for attempt in 1..=REGISTER_ATTEMPTS {
        match gridbox.register(net.as_ref()) {
            Ok(m) => {
                info!("{}: registered; VO has {} nodes", cfg.node_id, m.nodes.len());
                last = None;
                break;
            }
            Err(e) => {
                warn!("{}: registration attempt {attempt} failed: {e}", cfg.node_id);
                let fatal = matches!(e.code, ErrorCode::AuthFailed | ErrorCode::DuplicateNodeId);
                last = Some(e);
                if fatal {
                    break;
                }
                if attempt < REGISTER_ATTEMPTS {
                    thread::sleep(Duration::from_millis(FIRST_BACKOFF_MS << (attempt - 1)));
                }
            }
        }
    }
    if let Some(last) = last {
        server.shutdown();
        return Err(DaemonError::Registration {
            attempts: REGISTER_ATTEMPTS,
            last,
        });
    }

    let stop = Arc::new(AtomicBool::new(false));
    let heartbeat = {
        let (gb, stop, net) = (gridbox.clone(), stop.clone(), net.clone());
        let period = Duration::from_millis(cfg.heartbeat_interval_ms);
        thread::spawn(move || {
            let tick = Duration::from_millis(20);
            let mut waited = Duration::ZERO;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(tick);
                waited += tick;
                if waited >= period {
                    waited = Duration::ZERO;
                    if let Err(e) = gb.heartbeat(net.as_ref()) {
                        warn!("{}: heartbeat failed: {e}", gb.node_id());
                    }
                }
            }
        })
    };
    info!("{} serving site {} on {}", cfg.node_id, cfg.site_id, server.local_addr());
    Ok(RunningNode {
        gridbox,
        server,
        stop,
        heartbeat: Some(heartbeat),
    })
}

/// Blocks until SIGTERM or SIGINT.
pub fn wait_for_signal() -> std::io::Result<()> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, flag.clone())?;
    }
    while !flag.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(100));
    }
    Ok(())
}
