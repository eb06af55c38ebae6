//! Request/response client used by the command line and the tests. It talks
//! to one entry Grid-box (or the central node for administration).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use thiserror::Error;

use super::gridbox::reply_as;
use super::proto::*;
use crate::analysis::{AlgorithmId, Job};
use crate::collab::{CaseRef, CombinedReport, Label, SecondOpinionCase};
use crate::digest::sha256_hex;
use crate::ingest::IngestOutcome;
use crate::net::{Message, MsgType, NetError, NodeInfo, Transport, VoMembership};
use crate::query::ResultSet;
use crate::store::{CatalogueEntry, Replica};

pub const CLIENT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("{0}")]
    Remote(#[from] ServiceError),
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("checksum mismatch: expected {expected}, received {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedImage {
    pub lfn: String,
    pub guid: String,
    pub checksum: String,
    pub data: Vec<u8>,
    pub chunks: usize,
}

/// Joins an `ImageChunk` stream and checks the bytes against its checksum.
pub fn reassemble(frames: &[Message]) -> Result<FetchedImage, ClientError> {
    let mut data = Vec::new();
    let mut head: Option<ImageChunk> = None;
    for (i, frame) in frames.iter().enumerate() {
        if let Some(e) = ServiceError::from_message(frame) {
            return Err(e.into());
        }
        let chunk: ImageChunk = frame.parse().map_err(|e| ClientError::Protocol(e.to_string()))?;
        if chunk.seq as usize != i || chunk.total as usize != frames.len() {
            return Err(ClientError::Protocol(format!(
                "chunk {} of {} arrived at position {i} of {}",
                chunk.seq,
                chunk.total,
                frames.len()
            )));
        }
        data.extend(
            B64.decode(&chunk.data)
                .map_err(|e| ClientError::Protocol(format!("chunk {i}: {e}")))?,
        );
        head.get_or_insert(chunk);
    }
    let head = head.ok_or_else(|| ClientError::Protocol("empty chunk stream".into()))?;
    let actual = sha256_hex(&data);
    if actual != head.checksum || data.len() as u64 != head.size {
        return Err(ClientError::ChecksumMismatch {
            expected: head.checksum,
            actual,
        });
    }
    Ok(FetchedImage {
        lfn: head.lfn,
        guid: head.guid,
        checksum: head.checksum,
        data,
        chunks: frames.len(),
    })
}

pub struct Client<'a> {
    net: &'a dyn Transport,
    node: String,
    token: String,
    name: String,
    timeout_ms: u64,
    seq: AtomicU64,
}

impl<'a> Client<'a> {
    /// `node` is the transport address of the entry Grid-box.
    pub fn new(net: &'a dyn Transport, node: &str, token: &str) -> Self {
        Self {
            net,
            node: node.to_string(),
            token: token.to_string(),
            name: "client".into(),
            timeout_ms: CLIENT_TIMEOUT_MS,
            seq: AtomicU64::new(0),
        }
    }

    /// Sender name used for accounting and tracing.
    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_timeout(mut self, ms: u64) -> Self {
        self.timeout_ms = ms;
        self
    }

    fn next_id(&self) -> String {
        format!("{}-{}", self.name, self.seq.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn call(&self, t: MsgType, body: &impl serde::Serialize) -> Result<Vec<Message>, ClientError> {
        Ok(self
            .net
            .request(&self.name, &self.node, Message::new(t, body), self.timeout_ms)?)
    }

    fn call_as<T: serde::de::DeserializeOwned>(
        &self,
        t: MsgType,
        body: &impl serde::Serialize,
    ) -> Result<T, ClientError> {
        Ok(reply_as(&self.call(t, body)?)?)
    }

    pub fn query(&self, text: &str) -> Result<ResultSet, ClientError> {
        let req = QueryRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            query: text.to_string(),
        };
        Ok(self.call_as::<QueryReply>(MsgType::QueryRequest, &req)?.result)
    }

    pub fn ingest(&self, mgif: &[u8]) -> Result<IngestOutcome, ClientError> {
        let req = IngestRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            mgif: B64.encode(mgif),
        };
        Ok(self.call_as::<IngestReply>(MsgType::Ingest, &req)?.outcome)
    }

    pub fn fetch(&self, lfn: &str) -> Result<FetchedImage, ClientError> {
        let req = FetchRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            lfn: lfn.to_string(),
            relayed: false,
        };
        reassemble(&self.call(MsgType::FetchImage, &req)?)
    }

    /// Builds and runs `SELECT images WHERE <where_clause> APPLY alg(params)`.
    pub fn job_submit(
        &self,
        algorithm: AlgorithmId,
        params: &BTreeMap<String, String>,
        where_clause: &str,
    ) -> Result<ResultSet, ClientError> {
        let args: Vec<String> = params
            .iter()
            .map(|(k, v)| {
                if v.parse::<f64>().is_ok() || v.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    format!("{k}={v}")
                } else {
                    format!("{k}='{}'", v.replace('\'', "''"))
                }
            })
            .collect();
        self.query(&format!("SELECT images WHERE {where_clause} APPLY {algorithm}({})", args.join(", ")))
    }

    pub fn job_status(&self, job_id: &str) -> Result<Job, ClientError> {
        let req = JobStatusRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            job_id: job_id.to_string(),
        };
        Ok(self.call_as::<JobReply>(MsgType::JobStatus, &req)?.job)
    }

    fn so(&self, op: SecondOpinionOp, f: impl FnOnce(&mut SecondOpinionRequest)) -> Result<SecondOpinionReply, ClientError> {
        let mut req = SecondOpinionRequest::new(&self.token, &self.next_id(), op);
        f(&mut req);
        self.call_as(MsgType::SecondOpinionRequest, &req)
    }

    fn missing(what: &str) -> ClientError {
        ClientError::Protocol(format!("reply carries no {what}"))
    }

    pub fn so_request(&self, lfn: &str, target_site: &str) -> Result<SecondOpinionCase, ClientError> {
        self.so(SecondOpinionOp::Request, |r| {
            r.lfn = Some(lfn.to_string());
            r.target_site = Some(target_site.to_string());
        })?
        .case
        .ok_or_else(|| Self::missing("case"))
    }

    pub fn so_list(&self) -> Result<Vec<CaseRef>, ClientError> {
        Ok(self.so(SecondOpinionOp::List, |_| {})?.cases)
    }

    pub fn so_get(&self, case_id: &str) -> Result<SecondOpinionCase, ClientError> {
        self.so(SecondOpinionOp::Get, |r| r.case_id = Some(case_id.to_string()))?
            .case
            .ok_or_else(|| Self::missing("case"))
    }

    pub fn so_report(&self, case_id: &str) -> Result<CombinedReport, ClientError> {
        self.so(SecondOpinionOp::Report, |r| r.case_id = Some(case_id.to_string()))?
            .report
            .ok_or_else(|| Self::missing("report"))
    }

    pub fn annotate(
        &self,
        case_id: &str,
        label: Label,
        region: Vec<(u32, u32)>,
        note: &str,
    ) -> Result<SecondOpinionCase, ClientError> {
        let req = AnnotateRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            case_id: case_id.to_string(),
            label,
            region,
            note: note.to_string(),
            entry_site: None,
        };
        self.call_as::<SecondOpinionReply>(MsgType::AnnotationPush, &req)?
            .case
            .ok_or_else(|| Self::missing("case"))
    }

    fn cat(&self, op: CatalogueOp, f: impl FnOnce(&mut CatalogueRequest)) -> Result<CatalogueReply, ClientError> {
        let mut req = CatalogueRequest::new(&self.token, &self.next_id(), op);
        f(&mut req);
        self.call_as(MsgType::Catalogue, &req)
    }

    pub fn ls(&self, prefix: &str) -> Result<Vec<CatalogueEntry>, ClientError> {
        Ok(self.cat(CatalogueOp::Ls, |r| r.prefix = Some(prefix.to_string()))?.entries)
    }

    pub fn whereis(&self, guid: &str) -> Result<Vec<Replica>, ClientError> {
        Ok(self.cat(CatalogueOp::Whereis, |r| r.guid = Some(guid.to_string()))?.replicas)
    }

    pub fn lookup(&self, lfn: &str) -> Result<CatalogueEntry, ClientError> {
        self.cat(CatalogueOp::Lookup, |r| r.lfn = Some(lfn.to_string()))?
            .entries
            .into_iter()
            .next()
            .ok_or_else(|| Self::missing("entry"))
    }

    pub fn verify(&self, guid: &str) -> Result<VerifyReport, ClientError> {
        self.cat(CatalogueOp::Verify, |r| r.guid = Some(guid.to_string()))?
            .verify
            .ok_or_else(|| Self::missing("verify report"))
    }

    pub fn replicate(&self, guid: &str, target_node: &str) -> Result<CatalogueEntry, ClientError> {
        self.cat(CatalogueOp::Replicate, |r| {
            r.guid = Some(guid.to_string());
            r.target_node = Some(target_node.to_string());
        })?
        .entries
        .into_iter()
        .next()
        .ok_or_else(|| Self::missing("entry"))
    }

    /// Membership as seen by the central node; `self.node` must be central.
    pub fn discover(&self) -> Result<VoMembership, ClientError> {
        let req = RegisterRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            op: RegisterOp::Discover,
            node: None,
        };
        Ok(self.call_as::<RegisterReply>(MsgType::Register, &req)?.membership)
    }

    /// Admits a node to the VO; `self.node` must be central.
    pub fn add_node(&self, node: NodeInfo) -> Result<VoMembership, ClientError> {
        let req = RegisterRequest {
            token: self.token.clone(),
            request_id: self.next_id(),
            op: RegisterOp::Register,
            node: Some(node),
        };
        Ok(self.call_as::<RegisterReply>(MsgType::Register, &req)?.membership)
    }
}
