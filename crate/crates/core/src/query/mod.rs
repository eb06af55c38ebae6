//! Federated query: language, planning, local execution and merging.

mod exec;
mod merge;
mod parse;
mod plan;

use thiserror::Error;

pub use exec::{check_access, eval_cond, execute_local, select_records};
pub use merge::{merge, merge_key, NodeOutcome, NodeStatus, ResultSet};
pub use parse::{parse_query, Apply, Atom, CmpOp, Cond, Entity, Literal, QueryAst};
pub use plan::{plan, pruned_site, PlanMember, QueryPlan};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("type mismatch for field {0}")]
    TypeMismatch(String),
    #[error("unknown algorithm {0}")]
    UnknownAlgorithm(String),
    #[error("{0}")]
    InvalidParam(String),
    #[error("unsupported query: {0}")]
    Unsupported(String),
    #[error("no nodes available")]
    NoNodesAvailable,
    #[error("denied: {0}")]
    Denied(String),
}
