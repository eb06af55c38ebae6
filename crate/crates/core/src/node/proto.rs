//! Typed message bodies. Every request carries the caller's token and a
//! request id; replies echo the request id.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{AnalysisError, Job, Selection};
use crate::collab::{CaseRef, CollabError, CombinedReport, Label, SecondOpinionCase};
use crate::ingest::{IngestError, IngestOutcome};
use crate::net::registry::{NodeInfo, RegistryError, VoMembership};
use crate::net::{FrameError, Message, MsgType, NetError};
use crate::query::{QueryError, ResultSet};
use crate::security::TokenError;
use crate::store::{CatalogueEntry, Replica, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    AuthFailed,
    Denied,
    BadRequest,
    SyntaxError,
    UnknownField,
    TypeMismatch,
    NoNodesAvailable,
    NotFound,
    SameSite,
    DuplicateAuthor,
    CaseClosed,
    NotReady,
    InvalidAnnotation,
    ChecksumMismatch,
    NoLocalReplica,
    LfnConflict,
    DuplicateNodeId,
    Unavailable,
    Internal,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().unwrap_or("internal"))
    }
}

/// An error as carried in an `Error` frame.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn to_message(&self, request_id: &str) -> Message {
        Message::error(request_id, &self.code.to_string(), self.message.clone())
    }

    /// Reads an `Error` frame back.
    pub fn from_message(msg: &Message) -> Option<Self> {
        if msg.msg_type != MsgType::Error {
            return None;
        }
        let code = serde_json::from_value(msg.body["code"].clone()).unwrap_or(ErrorCode::Internal);
        let message = msg.body["message"].as_str().unwrap_or_default().to_string();
        Some(Self { code, message })
    }
}

impl From<TokenError> for ServiceError {
    fn from(e: TokenError) -> Self {
        ServiceError::new(ErrorCode::AuthFailed, e.to_string())
    }
}

impl From<QueryError> for ServiceError {
    fn from(e: QueryError) -> Self {
        let code = match &e {
            QueryError::Syntax { .. } => ErrorCode::SyntaxError,
            QueryError::UnknownField(_) => ErrorCode::UnknownField,
            QueryError::TypeMismatch(_) => ErrorCode::TypeMismatch,
            QueryError::NoNodesAvailable => ErrorCode::NoNodesAvailable,
            QueryError::Denied(_) => ErrorCode::Denied,
            _ => ErrorCode::BadRequest,
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<CollabError> for ServiceError {
    fn from(e: CollabError) -> Self {
        let code = match &e {
            CollabError::Denied(_) => ErrorCode::Denied,
            CollabError::NotFound(_) => ErrorCode::NotFound,
            CollabError::SameSite => ErrorCode::SameSite,
            CollabError::DuplicateAuthor => ErrorCode::DuplicateAuthor,
            CollabError::CaseClosed => ErrorCode::CaseClosed,
            CollabError::NotReady => ErrorCode::NotReady,
            CollabError::InvalidAnnotation(_) => ErrorCode::InvalidAnnotation,
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => ErrorCode::NotFound,
            StoreError::LfnConflict(_) => ErrorCode::LfnConflict,
            StoreError::InvalidLfn(_) | StoreError::InvalidEntry(_) => ErrorCode::BadRequest,
            StoreError::NoLocalReplica(_) => ErrorCode::NoLocalReplica,
            _ => ErrorCode::Internal,
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<IngestError> for ServiceError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Store(s) => s.into(),
            other => ServiceError::new(ErrorCode::BadRequest, other.to_string()),
        }
    }
}

impl From<AnalysisError> for ServiceError {
    fn from(e: AnalysisError) -> Self {
        ServiceError::new(ErrorCode::BadRequest, e.to_string())
    }
}

impl From<RegistryError> for ServiceError {
    fn from(e: RegistryError) -> Self {
        let code = match e {
            RegistryError::DuplicateNodeId(_) => ErrorCode::DuplicateNodeId,
            RegistryError::UnknownNode(_) => ErrorCode::NotFound,
        };
        ServiceError::new(code, e.to_string())
    }
}

impl From<FrameError> for ServiceError {
    fn from(e: FrameError) -> Self {
        ServiceError::new(ErrorCode::BadRequest, e.to_string())
    }
}

impl From<NetError> for ServiceError {
    fn from(e: NetError) -> Self {
        ServiceError::new(ErrorCode::Unavailable, e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterOp {
    Register,
    Discover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub token: String,
    pub request_id: String,
    pub op: RegisterOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterReply {
    pub request_id: String,
    pub membership: VoMembership,
    pub heartbeat_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatReply {
    pub membership: VoMembership,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub token: String,
    pub request_id: String,
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReply {
    pub request_id: String,
    pub result: ResultSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubQueryMode {
    /// Redacted records.
    Rows,
    /// Matching images with their replica locations, for job placement.
    Select,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQueryRequest {
    pub token: String,
    pub request_id: String,
    pub query: String,
    pub mode: SubQueryMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryReply {
    pub request_id: String,
    pub node_id: String,
    pub site_id: String,
    #[serde(default)]
    pub rows: Vec<Value>,
    #[serde(default)]
    pub selections: Vec<Selection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSubmit {
    pub token: String,
    pub request_id: String,
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatusRequest {
    pub token: String,
    pub request_id: String,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReply {
    pub request_id: String,
    pub job: Job,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub token: String,
    pub request_id: String,
    pub lfn: String,
    /// Set when a node forwards the request to the owning site.
    #[serde(default)]
    pub relayed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageChunk {
    pub request_id: String,
    pub lfn: String,
    pub guid: String,
    /// Catalogue checksum of the whole blob.
    pub checksum: String,
    pub size: u64,
    pub seq: u32,
    pub total: u32,
    pub last: bool,
    /// Base64 of this chunk's bytes.
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub token: String,
    pub request_id: String,
    pub case_id: String,
    pub label: Label,
    pub region: Vec<(u32, u32)>,
    #[serde(default)]
    pub note: String,
    /// Site the request entered the federation at; set when forwarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_site: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOpinionOp {
    Request,
    Advertise,
    List,
    Get,
    Report,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondOpinionRequest {
    pub token: String,
    pub request_id: String,
    pub op: SecondOpinionOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lfn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_site: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_ref: Option<CaseRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_site: Option<String>,
}

impl SecondOpinionRequest {
    pub fn new(token: &str, request_id: &str, op: SecondOpinionOp) -> Self {
        Self {
            token: token.to_string(),
            request_id: request_id.to_string(),
            op,
            lfn: None,
            target_site: None,
            case_id: None,
            case_ref: None,
            entry_site: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOpinionReply {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<SecondOpinionCase>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<CaseRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<CombinedReport>,
}

impl SecondOpinionReply {
    pub fn new(request_id: &str) -> Self {
        Self {
            request_id: request_id.to_string(),
            case: None,
            cases: Vec::new(),
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub token: String,
    pub request_id: String,
    /// Base64 of an MGIF container.
    pub mgif: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReply {
    pub request_id: String,
    pub outcome: IngestOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogueOp {
    Ls,
    Whereis,
    Lookup,
    Verify,
    /// Ask the holder of `guid` to copy it to `target_node`.
    Replicate,
    /// Ask `target_node` to fetch `lfn` from `source_node` and hold a copy.
    Pull,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueRequest {
    pub token: String,
    pub request_id: String,
    pub op: CatalogueOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lfn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_node: Option<String>,
    /// Answer from this node's catalogue only, without asking other sites.
    #[serde(default)]
    pub local_only: bool,
}

impl CatalogueRequest {
    pub fn new(token: &str, request_id: &str, op: CatalogueOp) -> Self {
        Self {
            token: token.to_string(),
            request_id: request_id.to_string(),
            op,
            prefix: None,
            guid: None,
            lfn: None,
            target_node: None,
            source_node: None,
            local_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub guid: String,
    pub node_id: String,
    pub ok: bool,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogueReply {
    pub request_id: String,
    #[serde(default)]
    pub entries: Vec<CatalogueEntry>,
    #[serde(default)]
    pub replicas: Vec<Replica>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyReport>,
}

impl CatalogueReply {
    pub fn new(request_id: &str) -> Self {
        Self {
            request_id: request_id.to_string(),
            entries: Vec::new(),
            replicas: Vec::new(),
            verify: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_frames_round_trip() {
        let e = ServiceError::new(ErrorCode::NoLocalReplica, "x");
        let m = e.to_message("r-1");
        assert_eq!(m.body["code"], "no_local_replica");
        assert_eq!(m.request_id(), "r-1");
        assert_eq!(ServiceError::from_message(&m), Some(e));
        assert_eq!(ServiceError::from_message(&Message::error("r", "weird", "?")).unwrap().code, ErrorCode::Internal);
    }

    #[test]
    fn optional_fields_are_omitted() {
        let r = SecondOpinionRequest::new("t", "r", SecondOpinionOp::List);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v, serde_json::json!({"token": "t", "request_id": "r", "op": "list"}));
    }
}
