//! The per-site Grid-box: serves its local store to the federation and
//! coordinates federated queries submitted by its own users.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, info, warn};
use serde::de::DeserializeOwned;

use super::proto::*;
use crate::analysis::{collect, run_job, schedule_jobs, AlgorithmId, Job, JobTarget, Selection};
use crate::collab::{AnnotationDraft, CaseRef, Reader, SecondOpinionCase};
use crate::ingest::{ingest_bytes, ingest_case, IngestContext, IngestOutcome, RawCase};
use crate::model::Record;
use crate::net::{Message, MsgType, NetError, NodeInfo, NodeState, Service, Transport, VoMembership, CHUNK_SIZE};
use crate::query::{
    check_access, execute_local, merge, parse_query, plan, NodeOutcome, NodeStatus, PlanMember, QueryAst, ResultSet,
};
use crate::security::{authorize, verify_token, Action, Decision, Identity};
use crate::store::{validate_lfn, Integrity, LocalStore, Replica};

pub const DEFAULT_HEARTBEAT_MS: u64 = 2000;
pub const DEFAULT_QUERY_TIMEOUT_MS: u64 = 5000;

#[derive(Debug, Clone)]
pub struct GridBoxConfig {
    pub node_id: String,
    pub site_id: String,
    /// Address peers use to reach this node.
    pub address: String,
    pub central: String,
    pub node_secret: Vec<u8>,
    /// Verifies every caller's token locally.
    pub central_secret: Vec<u8>,
    /// Admin-issued credential presented when registering.
    pub node_token: String,
    pub heartbeat_interval_ms: u64,
    pub query_timeout_ms: u64,
}

pub struct GridBox {
    cfg: GridBoxConfig,
    store: Mutex<LocalStore>,
    membership: Mutex<VoMembership>,
    jobs: Mutex<BTreeMap<String, Job>>,
    seq: AtomicU64,
}

type Handled = Result<Vec<Message>, ServiceError>;

/// Site segment of `/mgvo/<site>/...`.
pub fn lfn_site(lfn: &str) -> Option<&str> {
    lfn.strip_prefix("/mgvo/")?.split('/').next().filter(|s| !s.is_empty())
}

fn one<T: serde::Serialize>(t: MsgType, body: &T) -> Handled {
    Ok(vec![Message::new(t, body)])
}

fn denied(d: Decision) -> Result<(), ServiceError> {
    match d {
        Decision::Allow => Ok(()),
        Decision::Deny(reason) => Err(ServiceError::new(ErrorCode::Denied, reason)),
    }
}

fn required<T>(v: Option<T>, what: &str) -> Result<T, ServiceError> {
    v.ok_or_else(|| ServiceError::new(ErrorCode::BadRequest, format!("missing {what}")))
}

/// First reply frame parsed as `T`, or the remote error it carries.
pub fn reply_as<T: DeserializeOwned>(frames: &[Message]) -> Result<T, ServiceError> {
    let first = frames
        .first()
        .ok_or_else(|| ServiceError::new(ErrorCode::Internal, "empty reply"))?;
    if let Some(e) = ServiceError::from_message(first) {
        return Err(e);
    }
    Ok(first.parse()?)
}

fn status_of(result: Result<Vec<Message>, NetError>) -> Result<Vec<Message>, NodeStatus> {
    match result {
        Ok(frames) => match frames.first().and_then(ServiceError::from_message) {
            Some(e) => Err(NodeStatus::error(e.to_string())),
            None => Ok(frames),
        },
        Err(NetError::Timeout) => Err(NodeStatus::Timeout),
        Err(e) => Err(NodeStatus::error(e.to_string())),
    }
}

impl GridBox {
    pub fn new(cfg: GridBoxConfig, store: LocalStore) -> Self {
        Self {
            cfg,
            store: Mutex::new(store),
            membership: Mutex::new(VoMembership::default()),
            jobs: Mutex::new(BTreeMap::new()),
            seq: AtomicU64::new(0),
        }
    }

    pub fn node_id(&self) -> &str {
        &self.cfg.node_id
    }

    pub fn site_id(&self) -> &str {
        &self.cfg.site_id
    }

    pub fn config(&self) -> &GridBoxConfig {
        &self.cfg
    }

    pub fn store(&self) -> MutexGuard<'_, LocalStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn cached_membership(&self) -> VoMembership {
        self.membership.lock().unwrap().clone()
    }

    fn next_id(&self) -> String {
        format!("{}-{}", self.cfg.node_id, self.seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    /// Ingests a case straight into the local store, bypassing the wire.
    pub fn ingest_raw(&self, raw: &RawCase, now: u64) -> Result<IngestOutcome, ServiceError> {
        let ctx = IngestContext {
            node_secret: &self.cfg.node_secret,
            site_id: &self.cfg.site_id,
            now,
        };
        Ok(ingest_case(raw, &ctx, &mut self.store())?)
    }

    fn central_call(&self, net: &dyn Transport, msg: Message) -> Result<Vec<Message>, ServiceError> {
        Ok(net.request(&self.cfg.node_id, &self.cfg.central, msg, self.cfg.heartbeat_interval_ms.max(1000))?)
    }

    pub fn register(&self, net: &dyn Transport) -> Result<VoMembership, ServiceError> {
        let req = RegisterRequest {
            token: self.cfg.node_token.clone(),
            request_id: self.next_id(),
            op: RegisterOp::Register,
            node: Some(NodeInfo {
                node_id: self.cfg.node_id.clone(),
                site_id: self.cfg.site_id.clone(),
                address: self.cfg.address.clone(),
                algorithms: [AlgorithmId::Density, AlgorithmId::Cade]
                    .iter()
                    .map(|a| a.as_str().to_string())
                    .collect(),
            }),
        };
        let reply: RegisterReply = reply_as(&self.central_call(net, Message::new(MsgType::Register, &req))?)?;
        *self.membership.lock().unwrap() = reply.membership.clone();
        Ok(reply.membership)
    }

    /// Sends one heartbeat; re-registers if the central node has forgotten us.
    pub fn heartbeat(&self, net: &dyn Transport) -> Result<(), ServiceError> {
        let hb = Message::new(
            MsgType::Heartbeat,
            &Heartbeat {
                node_id: self.cfg.node_id.clone(),
            },
        );
        match reply_as::<HeartbeatReply>(&self.central_call(net, hb)?) {
            Ok(r) => {
                *self.membership.lock().unwrap() = r.membership;
                Ok(())
            }
            Err(e) if e.code == ErrorCode::NotFound => self.register(net).map(|_| ()),
            Err(e) => Err(e),
        }
    }

    /// Current membership from the central node, or the last known one.
    pub fn discover(&self, net: &dyn Transport) -> VoMembership {
        let req = RegisterRequest {
            token: self.cfg.node_token.clone(),
            request_id: self.next_id(),
            op: RegisterOp::Discover,
            node: None,
        };
        let fresh = self
            .central_call(net, Message::new(MsgType::Register, &req))
            .and_then(|f| reply_as::<RegisterReply>(&f));
        match fresh {
            Ok(r) => {
                *self.membership.lock().unwrap() = r.membership.clone();
                r.membership
            }
            Err(e) => {
                warn!("{}: discovery failed ({e}); using cached membership", self.cfg.node_id);
                self.cached_membership()
            }
        }
    }

    fn identity(&self, token: &str, net: &dyn Transport) -> Result<Identity, ServiceError> {
        Ok(verify_token(token, &self.cfg.central_secret, net.now_secs())?)
    }

    fn address_of(&self, node_id: &str, net: &dyn Transport) -> Result<String, ServiceError> {
        if let Some(n) = self.cached_membership().get(node_id) {
            return Ok(n.address.clone());
        }
        self.discover(net)
            .get(node_id)
            .map(|n| n.address.clone())
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("unknown node {node_id}")))
    }

    /// Lowest live node of `site` other than this one.
    fn node_for_site(&self, site: &str, net: &dyn Transport) -> Result<(String, String), ServiceError> {
        self.discover(net)
            .live()
            .filter(|n| n.site_id == site && n.node_id != self.cfg.node_id)
            .map(|n| (n.node_id.clone(), n.address.clone()))
            .min()
            .ok_or_else(|| ServiceError::new(ErrorCode::Unavailable, format!("no live node for site {site}")))
    }

    fn forward(&self, net: &dyn Transport, addr: &str, msg: Message) -> Handled {
        Ok(net.request(&self.cfg.node_id, addr, msg, self.cfg.query_timeout_ms)?)
    }

    fn authorize_query(&self, identity: &Identity, ast: &QueryAst) -> Result<(), ServiceError> {
        denied(authorize(
            identity,
            if ast.count_only { Action::CountQuery } else { Action::Query },
        ))?;
        if let Some(apply) = &ast.apply {
            denied(authorize(identity, Action::ApplyAlgorithm(apply.algorithm)))?;
        }
        Ok(check_access(ast, identity.data_role())?)
    }

    // ---- federated query (coordinator side) ----

    /// Parses, plans, scatters and merges a query on behalf of a user.
    pub fn run_query(&self, token: &str, text: &str, net: &dyn Transport) -> Result<ResultSet, ServiceError> {
        let identity = self.identity(token, net)?;
        let ast = parse_query(text)?;
        self.authorize_query(&identity, &ast)?;
        let membership = self.discover(net);
        let members: Vec<PlanMember> = membership
            .nodes
            .iter()
            .map(|n| PlanMember {
                node_id: n.node_id.clone(),
                site_id: n.site_id.clone(),
                live: n.status == NodeState::Live,
            })
            .collect();
        let plan = plan(&ast, &members)?;
        let mode = if ast.apply.is_some() { SubQueryMode::Select } else { SubQueryMode::Rows };
        let requests: Vec<(String, Message)> = plan
            .sub_queries
            .iter()
            .map(|(node, sub)| {
                let addr = membership.get(node).map(|n| n.address.clone()).unwrap_or_default();
                let body = SubQueryRequest {
                    token: token.to_string(),
                    request_id: self.next_id(),
                    query: sub.to_string(),
                    mode,
                };
                (addr, Message::new(MsgType::SubQueryRequest, &body))
            })
            .collect();
        debug!("{}: {} sub-queries for {ast}", self.cfg.node_id, requests.len());
        let answers = net.exchange(&self.cfg.node_id, requests, self.cfg.query_timeout_ms);
        let site_of = |node: &str| membership.get(node).map(|n| n.site_id.clone()).unwrap_or_default();
        let mut replies = Vec::new();
        for ((node, _), answer) in plan.sub_queries.iter().zip(answers) {
            let parsed = status_of(answer).and_then(|f| {
                reply_as::<SubQueryReply>(&f).map_err(|e| NodeStatus::error(e.to_string()))
            });
            replies.push((node.clone(), parsed));
        }
        for node in &plan.unavailable {
            replies.push((node.clone(), Err(NodeStatus::error("node unavailable"))));
        }
        match &ast.apply {
            None => Ok(merge(
                replies
                    .into_iter()
                    .map(|(node, r)| {
                        let site_id = site_of(&node);
                        match r {
                            Ok(reply) => NodeOutcome {
                                node_id: node,
                                site_id,
                                status: NodeStatus::Ok,
                                rows: reply.rows,
                            },
                            Err(status) => NodeOutcome {
                                node_id: node,
                                site_id,
                                status,
                                rows: Vec::new(),
                            },
                        }
                    })
                    .collect(),
            )),
            Some(apply) => {
                let mut selections: Vec<Selection> = Vec::new();
                let mut statuses = BTreeMap::new();
                for (node, r) in replies {
                    match r {
                        Ok(reply) => {
                            selections.extend(reply.selections);
                            statuses.insert(node, NodeStatus::Ok);
                        }
                        Err(s) => {
                            statuses.insert(node, s);
                        }
                    }
                }
                let live: BTreeSet<String> = membership.live().map(|n| n.node_id.clone()).collect();
                let jobs = schedule_jobs(
                    &selections,
                    apply.algorithm,
                    &apply.params,
                    &live,
                    &identity.subject,
                    &self.next_id(),
                )?;
                let requests = jobs
                    .iter()
                    .map(|job| {
                        let addr = membership.get(&job.node_id).map(|n| n.address.clone()).unwrap_or_default();
                        let body = JobSubmit {
                            token: token.to_string(),
                            request_id: self.next_id(),
                            job: job.clone(),
                        };
                        (addr, Message::new(MsgType::JobSubmit, &body))
                    })
                    .collect();
                let answers = net.exchange(&self.cfg.node_id, requests, self.cfg.query_timeout_ms);
                let done = jobs
                    .iter()
                    .zip(answers)
                    .map(|(job, answer)| {
                        let r = status_of(answer).and_then(|f| {
                            reply_as::<JobReply>(&f)
                                .map(|r| r.job)
                                .map_err(|e| NodeStatus::error(e.to_string()))
                        });
                        (job.node_id.clone(), r)
                    })
                    .collect();
                let mut rs = collect(done);
                for (node, s) in statuses {
                    rs.per_node_status.entry(node).or_insert(s);
                }
                rs.partial = rs.per_node_status.values().any(|s| !s.is_ok());
                Ok(rs)
            }
        }
    }

    // ---- handlers ----

    fn on_query(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: QueryRequest = msg.parse()?;
        let result = self.run_query(&req.token, &req.query, net)?;
        one(
            MsgType::QueryResult,
            &QueryReply {
                request_id: req.request_id,
                result,
            },
        )
    }

    fn on_sub_query(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: SubQueryRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        let ast = parse_query(&req.query)?;
        self.authorize_query(&identity, &ast)?;
        let store = self.store();
        let mut reply = SubQueryReply {
            request_id: req.request_id,
            node_id: self.cfg.node_id.clone(),
            site_id: self.cfg.site_id.clone(),
            rows: Vec::new(),
            selections: Vec::new(),
        };
        match req.mode {
            SubQueryMode::Rows => reply.rows = execute_local(&ast, &store, identity.data_role()),
            SubQueryMode::Select => {
                for record in crate::query::select_records(&ast, &store) {
                    let Record::Image(img) = record else { continue };
                    let replicas = store
                        .catalogue()
                        .whereis(&img.guid)
                        .map(|rs| rs.into_iter().map(|r| r.node_id).collect())
                        .unwrap_or_else(|_| vec![self.cfg.node_id.clone()]);
                    reply.selections.push(Selection {
                        target: JobTarget {
                            guid: img.guid.clone(),
                            width_px: img.width_px,
                            height_px: img.height_px,
                            bits_per_sample: img.bits_per_sample,
                        },
                        replicas,
                    });
                }
            }
        }
        one(MsgType::SubQueryResult, &reply)
    }

    fn on_job_submit(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: JobSubmit = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::ApplyAlgorithm(req.job.algorithm)))?;
        if req.job.node_id != self.cfg.node_id {
            return Err(ServiceError::new(
                ErrorCode::BadRequest,
                format!("job {} is assigned to {}", req.job.job_id, req.job.node_id),
            ));
        }
        let mut job = req.job;
        job.submitted_by = identity.subject;
        let job = run_job(job, &mut self.store());
        info!("{}: job {} {:?} over {} images", self.cfg.node_id, job.job_id, job.status, job.targets.len());
        self.jobs.lock().unwrap().insert(job.job_id.clone(), job.clone());
        one(
            MsgType::JobResult,
            &JobReply {
                request_id: req.request_id,
                job,
            },
        )
    }

    fn on_job_status(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: JobStatusRequest = msg.parse()?;
        self.identity(&req.token, net)?;
        let job = self
            .jobs
            .lock()
            .unwrap()
            .get(&req.job_id)
            .cloned()
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("job {}", req.job_id)))?;
        one(
            MsgType::JobResult,
            &JobReply {
                request_id: req.request_id,
                job,
            },
        )
    }

    fn chunks(&self, request_id: &str, lfn: &str) -> Result<Option<Vec<Message>>, ServiceError> {
        let store = self.store();
        let Ok(entry) = store.catalogue().lookup(lfn) else { return Ok(None) };
        if !store.has_blob(&entry.guid) {
            return Ok(None);
        }
        let data = store.get_blob(&entry.guid)?;
        drop(store);
        let total = data.len().div_ceil(CHUNK_SIZE).max(1);
        Ok(Some(
            (0..total)
                .map(|seq| {
                    let part = &data[(seq * CHUNK_SIZE).min(data.len())..((seq + 1) * CHUNK_SIZE).min(data.len())];
                    Message::new(
                        MsgType::ImageChunk,
                        &ImageChunk {
                            request_id: request_id.to_string(),
                            lfn: lfn.to_string(),
                            guid: entry.guid.clone(),
                            checksum: entry.checksum.clone(),
                            size: data.len() as u64,
                            seq: seq as u32,
                            total: total as u32,
                            last: seq + 1 == total,
                            data: B64.encode(part),
                        },
                    )
                })
                .collect(),
        ))
    }

    fn on_fetch(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: FetchRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::FetchImage))?;
        validate_lfn(&req.lfn)?;
        if let Some(frames) = self.chunks(&req.request_id, &req.lfn)? {
            return Ok(frames);
        }
        let site = lfn_site(&req.lfn).unwrap_or_default();
        if req.relayed || site == self.cfg.site_id {
            return Err(ServiceError::new(ErrorCode::NotFound, format!("no replica of {}", req.lfn)));
        }
        let (_, addr) = self.node_for_site(site, net)?;
        let relay = FetchRequest { relayed: true, ..req };
        self.forward(net, &addr, Message::new(MsgType::FetchImage, &relay))
    }

    fn on_ingest(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: IngestRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::Catalogue))?;
        let bytes = B64
            .decode(&req.mgif)
            .map_err(|e| ServiceError::new(ErrorCode::BadRequest, format!("bad base64: {e}")))?;
        let ctx = IngestContext {
            node_secret: &self.cfg.node_secret,
            site_id: &self.cfg.site_id,
            now: net.now_secs(),
        };
        let outcome = ingest_bytes(&bytes, &ctx, &mut self.store())?;
        one(
            MsgType::Ingest,
            &IngestReply {
                request_id: req.request_id,
                outcome,
            },
        )
    }

    /// Asks every other live node the same catalogue question locally.
    fn fan_out(&self, req: &CatalogueRequest, net: &dyn Transport) -> Vec<CatalogueReply> {
        let requests = self
            .discover(net)
            .live()
            .filter(|n| n.node_id != self.cfg.node_id)
            .map(|n| {
                let body = CatalogueRequest {
                    request_id: self.next_id(),
                    local_only: true,
                    ..req.clone()
                };
                (n.address.clone(), Message::new(MsgType::Catalogue, &body))
            })
            .collect();
        net.exchange(&self.cfg.node_id, requests, self.cfg.query_timeout_ms)
            .into_iter()
            .filter_map(|r| r.ok().and_then(|f| reply_as::<CatalogueReply>(&f).ok()))
            .collect()
    }

    fn on_catalogue(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: CatalogueRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::Catalogue))?;
        let mut reply = CatalogueReply::new(&req.request_id);
        match req.op {
            CatalogueOp::Ls => {
                let prefix = req.prefix.clone().unwrap_or_else(|| "/mgvo/".into());
                let mut by_lfn = BTreeMap::new();
                for e in self.store().catalogue().ls(&prefix) {
                    by_lfn.insert(e.lfn.clone(), e);
                }
                if !req.local_only {
                    for other in self.fan_out(&req, net) {
                        for e in other.entries {
                            let slot = by_lfn.entry(e.lfn.clone()).or_insert_with(|| e.clone());
                            for r in e.replicas {
                                if !slot.replicas.contains(&r) {
                                    slot.replicas.push(r);
                                }
                            }
                            slot.replicas.sort();
                        }
                    }
                }
                reply.entries = by_lfn.into_values().collect();
            }
            CatalogueOp::Whereis | CatalogueOp::Lookup => {
                let local = {
                    let store = self.store();
                    match req.op {
                        CatalogueOp::Whereis => {
                            let guid = required(req.guid.as_deref(), "guid")?;
                            store.catalogue().lookup_guid(guid)
                        }
                        _ => store.catalogue().lookup(required(req.lfn.as_deref(), "lfn")?),
                    }
                };
                let mut entries: Vec<_> = local.into_iter().collect();
                if !req.local_only {
                    entries.extend(self.fan_out(&req, net).into_iter().flat_map(|r| r.entries));
                }
                let mut merged = entries
                    .first()
                    .cloned()
                    .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, "not in any catalogue"))?;
                let replicas: BTreeSet<Replica> = entries.into_iter().flat_map(|e| e.replicas).collect();
                merged.replicas = replicas.into_iter().collect();
                reply.replicas = merged.replicas.clone();
                reply.entries = vec![merged];
            }
            CatalogueOp::Verify => {
                let guid = required(req.guid.clone(), "guid")?;
                let store = self.store();
                let expected = store.catalogue().lookup_guid(&guid)?.checksum;
                let (ok, actual) = match store.verify(&guid)? {
                    Integrity::Ok => (true, expected.clone()),
                    Integrity::Corrupt { actual, .. } => (false, actual),
                };
                reply.verify = Some(VerifyReport {
                    guid,
                    node_id: self.cfg.node_id.clone(),
                    ok,
                    expected,
                    actual,
                });
            }
            CatalogueOp::Replicate => {
                denied(authorize(&identity, Action::FetchImage))?;
                let guid = required(req.guid.clone(), "guid")?;
                let target = required(req.target_node.clone(), "target_node")?;
                let entry = self.store().catalogue().lookup_guid(&guid)?;
                if !self.store().has_blob(&guid) {
                    return Err(ServiceError::new(ErrorCode::NoLocalReplica, guid));
                }
                let addr = self.address_of(&target, net)?;
                let pull = CatalogueRequest {
                    request_id: self.next_id(),
                    op: CatalogueOp::Pull,
                    lfn: Some(entry.lfn.clone()),
                    source_node: Some(self.cfg.node_id.clone()),
                    ..req.clone()
                };
                let _: CatalogueReply = reply_as(&self.forward(net, &addr, Message::new(MsgType::Catalogue, &pull))?)?;
                let path = LocalStore::blob_relpath(&guid);
                let mut store = self.store();
                reply.entries = vec![store.catalogue_mut().add_replica(&guid, &target, &path)?];
            }
            CatalogueOp::Pull => {
                let lfn = required(req.lfn.clone(), "lfn")?;
                let source = required(req.source_node.clone(), "source_node")?;
                let addr = self.address_of(&source, net)?;
                let fetch = FetchRequest {
                    token: req.token.clone(),
                    request_id: self.next_id(),
                    lfn: lfn.clone(),
                    relayed: true,
                };
                let frames = self.forward(net, &addr, Message::new(MsgType::FetchImage, &fetch))?;
                let image = super::client::reassemble(&frames).map_err(|e| ServiceError::new(ErrorCode::ChecksumMismatch, e.to_string()))?;
                let mut store = self.store();
                store.put_blob(&image.data)?;
                let mine = store.local_replica(&image.guid);
                let size = image.data.len() as u64;
                store
                    .catalogue_mut()
                    .register(&lfn, &image.guid, size, &image.checksum, mine)?;
                let path = LocalStore::blob_relpath(&image.guid);
                reply.entries = vec![store.catalogue_mut().add_replica(&image.guid, &source, &path)?];
            }
        }
        one(MsgType::Catalogue, &reply)
    }

    // ---- second opinion ----

    fn with_case<R>(
        &self,
        case_id: &str,
        f: impl FnOnce(&mut SecondOpinionCase) -> Result<R, ServiceError>,
    ) -> Result<R, ServiceError> {
        let mut store = self.store();
        let mut case = store
            .case(case_id)
            .cloned()
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("case {case_id}")))?;
        let before = case.clone();
        let out = f(&mut case)?;
        if case != before {
            store.put_case(case)?;
        }
        Ok(out)
    }

    /// Owner of `case_id` and whether the request must travel there.
    fn case_owner<'a>(&self, case_id: &'a str) -> Result<(&'a str, bool), ServiceError> {
        let owner = case_id
            .split_once(':')
            .map(|(o, _)| o)
            .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("case {case_id}")))?;
        Ok((owner, owner != self.cfg.node_id))
    }

    fn advertise(&self, case_ref: &CaseRef, token: &str, net: &dyn Transport) {
        let targets: Vec<_> = self
            .discover(net)
            .live()
            .filter(|n| n.site_id == case_ref.target_site)
            .map(|n| (n.node_id.clone(), n.address.clone()))
            .collect();
        if targets.is_empty() {
            warn!("{}: no live node at {} to advertise {}", self.cfg.node_id, case_ref.target_site, case_ref.case_id);
        }
        for (node, addr) in targets {
            if node == self.cfg.node_id {
                if let Err(e) = self.store().put_case_ref(case_ref.clone()) {
                    warn!("cannot record case ref: {e}");
                }
                continue;
            }
            let mut body = SecondOpinionRequest::new(token, &self.next_id(), SecondOpinionOp::Advertise);
            body.case_ref = Some(case_ref.clone());
            let sent = self
                .forward(net, &addr, Message::new(MsgType::SecondOpinionRequest, &body))
                .and_then(|f| reply_as::<SecondOpinionReply>(&f));
            if let Err(e) = sent {
                warn!("{}: advertising {} to {node} failed: {e}", self.cfg.node_id, case_ref.case_id);
            }
        }
    }

    fn on_second_opinion(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: SecondOpinionRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::SecondOpinion))?;
        let entry_site = req.entry_site.clone().unwrap_or_else(|| self.cfg.site_id.clone());
        let reader = Reader {
            subject: &identity.subject,
            site: &entry_site,
        };
        let mut reply = SecondOpinionReply::new(&req.request_id);
        match req.op {
            SecondOpinionOp::Request => {
                let lfn = required(req.lfn.clone(), "lfn")?;
                let target = required(req.target_site.clone(), "target_site")?;
                validate_lfn(&lfn)?;
                let owner_site = lfn_site(&lfn).unwrap_or_default();
                if owner_site != self.cfg.site_id {
                    let (_, addr) = self.node_for_site(owner_site, net)?;
                    let fwd = SecondOpinionRequest {
                        entry_site: Some(entry_site.clone()),
                        ..req
                    };
                    return self.forward(net, &addr, Message::new(MsgType::SecondOpinionRequest, &fwd));
                }
                let case = {
                    let mut store = self.store();
                    let entry = store.catalogue().lookup(&lfn)?;
                    let img = store
                        .image_by_guid(&entry.guid)
                        .ok_or_else(|| ServiceError::new(ErrorCode::NotFound, format!("no image record for {lfn}")))?;
                    let dims = (img.width_px, img.height_px);
                    let case_id = format!("{}:{}", self.cfg.node_id, store.cases().count() + 1);
                    let case = SecondOpinionCase::open(
                        case_id,
                        entry.guid,
                        lfn,
                        dims,
                        reader,
                        &target,
                        &self.cfg.node_id,
                        net.now_secs(),
                    )?;
                    store.put_case(case.clone())?;
                    case
                };
                info!("{}: opened case {} for {}", self.cfg.node_id, case.case_id, case.target_site);
                self.advertise(&case.case_ref(), &req.token, net);
                reply.case = Some(case.view(reader)?);
            }
            SecondOpinionOp::Advertise => {
                let case_ref = required(req.case_ref, "case_ref")?;
                self.store().put_case_ref(case_ref)?;
            }
            SecondOpinionOp::List => {
                let store = self.store();
                let mut seen = BTreeMap::new();
                let mine = |r: &CaseRef| {
                    r.target_site == entry_site || (r.requester_site == entry_site && r.requester == identity.subject)
                };
                for r in store.cases().map(|c| c.case_ref()).chain(store.case_refs().cloned()) {
                    if mine(&r) {
                        seen.entry(r.case_id.clone()).or_insert(r);
                    }
                }
                reply.cases = seen.into_values().collect();
            }
            SecondOpinionOp::Get | SecondOpinionOp::Report => {
                let case_id = required(req.case_id.clone(), "case_id")?;
                let (owner, remote) = self.case_owner(&case_id)?;
                if remote {
                    let addr = self.address_of(owner, net)?;
                    let fwd = SecondOpinionRequest {
                        entry_site: Some(entry_site.clone()),
                        ..req
                    };
                    return self.forward(net, &addr, Message::new(MsgType::SecondOpinionRequest, &fwd));
                }
                if req.op == SecondOpinionOp::Get {
                    reply.case = Some(self.with_case(&case_id, |c| Ok(c.view(reader)?))?);
                } else {
                    reply.report = Some(self.with_case(&case_id, |c| Ok(c.report(reader)?))?);
                }
            }
        }
        one(MsgType::SecondOpinionRequest, &reply)
    }

    fn on_annotate(&self, msg: &Message, net: &dyn Transport) -> Handled {
        let req: AnnotateRequest = msg.parse()?;
        let identity = self.identity(&req.token, net)?;
        denied(authorize(&identity, Action::Annotate))?;
        let entry_site = req.entry_site.clone().unwrap_or_else(|| self.cfg.site_id.clone());
        let (owner, remote) = self.case_owner(&req.case_id)?;
        if remote {
            let addr = self.address_of(owner, net)?;
            let fwd = AnnotateRequest {
                entry_site: Some(entry_site),
                ..req
            };
            return self.forward(net, &addr, Message::new(MsgType::AnnotationPush, &fwd));
        }
        let reader = Reader {
            subject: &identity.subject,
            site: &entry_site,
        };
        let now = net.now_secs();
        let view = self.with_case(&req.case_id, |c| {
            let id = format!("{}/{}", c.case_id, c.annotations.len() + 1);
            let draft = AnnotationDraft {
                region: req.region.clone(),
                label: req.label,
                note: req.note.clone(),
            };
            c.submit(reader, draft, id, now)?;
            Ok(c.view(reader)?)
        })?;
        let mut reply = SecondOpinionReply::new(&req.request_id);
        reply.case = Some(view);
        one(MsgType::AnnotationPush, &reply)
    }

    fn dispatch(&self, msg: &Message, net: &dyn Transport) -> Handled {
        match msg.msg_type {
            MsgType::QueryRequest => self.on_query(msg, net),
            MsgType::SubQueryRequest => self.on_sub_query(msg, net),
            MsgType::JobSubmit => self.on_job_submit(msg, net),
            MsgType::JobStatus => self.on_job_status(msg, net),
            MsgType::FetchImage => self.on_fetch(msg, net),
            MsgType::Ingest => self.on_ingest(msg, net),
            MsgType::Catalogue => self.on_catalogue(msg, net),
            MsgType::SecondOpinionRequest => self.on_second_opinion(msg, net),
            MsgType::AnnotationPush => self.on_annotate(msg, net),
            other => Err(ServiceError::new(
                ErrorCode::BadRequest,
                format!("grid-box does not serve {}", other.name()),
            )),
        }
    }
}

impl Service for GridBox {
    fn handle(&self, _from: &str, msg: Message, net: &dyn Transport) -> Vec<Message> {
        self.dispatch(&msg, net).unwrap_or_else(|e| {
            debug!("{}: {} failed: {e}", self.cfg.node_id, msg.msg_type.name());
            vec![e.to_message(msg.request_id())]
        })
    }
}
