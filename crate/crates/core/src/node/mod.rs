//! Federation services built on the transport: the central registry, the
//! per-site Grid-box, the client, and a simulated federation harness.

pub mod central;
pub mod client;
pub mod gridbox;
pub mod proto;

pub use central::Central;
pub use client::{reassemble, Client, ClientError, FetchedImage};
pub use gridbox::{lfn_site, GridBox, GridBoxConfig, DEFAULT_HEARTBEAT_MS, DEFAULT_QUERY_TIMEOUT_MS};
pub use proto::{ErrorCode, ServiceError};

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use log::warn;

use crate::net::{SimConfig, SimNet, Transport};
use crate::security::{issue_token, Role};
use crate::store::LocalStore;

pub const CENTRAL_ADDR: &str = "central";
const TOKEN_LIFETIME_SECS: u64 = 30 * 24 * 3600;

/// Mints a token valid for thirty days from `now`.
pub fn mint_token(secret: &[u8], subject: &str, roles: &[Role], now: u64) -> String {
    let roles: BTreeSet<Role> = roles.iter().copied().collect();
    issue_token(subject, &roles, now + TOKEN_LIFETIME_SECS, secret, now)
        .expect("valid subject and roles")
        .to_wire()
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub node_id: String,
    pub site_id: String,
    pub data_dir: PathBuf,
}

/// A central node plus Grid-boxes on one simulated network. Node addresses
/// are their ids.
pub struct SimFederation {
    pub net: SimNet,
    pub central: Arc<Central>,
    pub nodes: Vec<Arc<GridBox>>,
    secret: Vec<u8>,
    interval_ms: u64,
}

impl SimFederation {
    pub fn start(
        cfg: SimConfig,
        secret: &[u8],
        specs: &[NodeSpec],
        interval_ms: u64,
    ) -> Result<Self, ServiceError> {
        let net = SimNet::new(cfg);
        let central = Arc::new(Central::new(secret, interval_ms));
        net.add_service(CENTRAL_ADDR, central.clone());
        let mut fed = Self {
            net,
            central,
            nodes: Vec::new(),
            secret: secret.to_vec(),
            interval_ms,
        };
        for spec in specs {
            fed.add_node(spec)?;
        }
        Ok(fed)
    }

    pub fn add_node(&mut self, spec: &NodeSpec) -> Result<Arc<GridBox>, ServiceError> {
        let store = LocalStore::open(&spec.data_dir, &spec.node_id)?;
        let node_token = self.token(&format!("node:{}", spec.node_id), &[Role::Admin]);
        let gb = Arc::new(GridBox::new(
            GridBoxConfig {
                node_id: spec.node_id.clone(),
                site_id: spec.site_id.clone(),
                address: spec.node_id.clone(),
                central: CENTRAL_ADDR.into(),
                node_secret: format!("{}-secret", spec.node_id).into_bytes(),
                central_secret: self.secret.clone(),
                node_token,
                heartbeat_interval_ms: self.interval_ms,
                query_timeout_ms: DEFAULT_QUERY_TIMEOUT_MS,
            },
            store,
        ));
        self.net.add_service(&spec.node_id, gb.clone());
        gb.register(&self.net)?;
        let beat = gb.clone();
        self.net.every(
            self.interval_ms,
            self.interval_ms,
            Arc::new(move |net: &dyn Transport| {
                if let Err(e) = beat.heartbeat(net) {
                    warn!("{}: heartbeat failed: {e}", beat.node_id());
                }
            }),
        );
        self.nodes.push(gb.clone());
        Ok(gb)
    }

    pub fn node(&self, node_id: &str) -> &Arc<GridBox> {
        self.nodes
            .iter()
            .find(|n| n.node_id() == node_id)
            .unwrap_or_else(|| panic!("no node {node_id}"))
    }

    pub fn token(&self, subject: &str, roles: &[Role]) -> String {
        mint_token(&self.secret, subject, roles, self.net.now_secs())
    }

    /// A client entering the federation at `node_id`.
    pub fn client(&self, node_id: &str, token: &str) -> Client<'_> {
        Client::new(&self.net, node_id, token).named(&format!("client@{node_id}"))
    }
}
