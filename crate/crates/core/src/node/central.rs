//! The VO central node: registration, discovery and liveness. It holds no
//! clinical data and routes no queries.

use std::sync::Mutex;

use log::info;

use super::proto::{ErrorCode, Heartbeat, HeartbeatReply, RegisterOp, RegisterReply, RegisterRequest, ServiceError};
use crate::net::{Message, MsgType, Registry, Service, Transport, VoMembership};
use crate::security::{authorize, verify_token, Action};

pub struct Central {
    registry: Mutex<Registry>,
    central_secret: Vec<u8>,
}

impl Central {
    pub fn new(central_secret: &[u8], heartbeat_interval_ms: u64) -> Self {
        Self {
            registry: Mutex::new(Registry::new(heartbeat_interval_ms)),
            central_secret: central_secret.to_vec(),
        }
    }

    pub fn membership(&self, now_ms: u64) -> VoMembership {
        self.registry.lock().unwrap().membership(now_ms)
    }

    fn register(&self, req: &RegisterRequest, now_ms: u64) -> Result<RegisterReply, ServiceError> {
        let identity = verify_token(&req.token, &self.central_secret, now_ms / 1000)?;
        let mut reg = self.registry.lock().unwrap();
        if req.op == RegisterOp::Register {
            // Only admin-issued credentials may add nodes.
            if !authorize(&identity, Action::VoAdmin).is_allowed() {
                return Err(ServiceError::new(
                    ErrorCode::AuthFailed,
                    format!("{} may not register nodes", identity.subject),
                ));
            }
            let node = req
                .node
                .clone()
                .ok_or_else(|| ServiceError::new(ErrorCode::BadRequest, "register without node info"))?;
            info!("registering {} ({}) at {}", node.node_id, node.site_id, node.address);
            reg.register(node, now_ms)?;
        }
        Ok(RegisterReply {
            request_id: req.request_id.clone(),
            membership: reg.membership(now_ms),
            heartbeat_interval_ms: reg.interval_ms(),
        })
    }
}

impl Service for Central {
    fn handle(&self, _from: &str, msg: Message, net: &dyn Transport) -> Vec<Message> {
        let now = net.now_ms();
        let request_id = msg.request_id().to_string();
        let reply = match msg.msg_type {
            MsgType::Register => msg
                .parse::<RegisterRequest>()
                .map_err(ServiceError::from)
                .and_then(|req| self.register(&req, now))
                .map(|r| Message::new(MsgType::Register, &r)),
            MsgType::Heartbeat => msg.parse::<Heartbeat>().map_err(ServiceError::from).and_then(|hb| {
                let mut reg = self.registry.lock().unwrap();
                reg.heartbeat(&hb.node_id, now)?;
                Ok(Message::new(
                    MsgType::Heartbeat,
                    &HeartbeatReply {
                        membership: reg.membership(now),
                    },
                ))
            }),
            other => Err(ServiceError::new(
                ErrorCode::BadRequest,
                format!("central node does not serve {}", other.name()),
            )),
        };
        vec![reply.unwrap_or_else(|e| e.to_message(&request_id))]
    }
}
