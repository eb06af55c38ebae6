//! Merging per-node partial results into one canonical result set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NodeStatus {
    Ok,
    Timeout,
    Error { message: String },
}

impl NodeStatus {
    pub fn error(message: impl Into<String>) -> Self {
        NodeStatus::Error {
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, NodeStatus::Ok)
    }
}

impl std::fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeStatus::Ok => f.write_str("ok"),
            NodeStatus::Timeout => f.write_str("timeout"),
            NodeStatus::Error { message } => write!(f, "error: {message}"),
        }
    }
}

/// What one node contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeOutcome {
    pub node_id: String,
    /// Used for rows that do not carry their own `site_id`.
    pub site_id: String,
    pub status: NodeStatus,
    pub rows: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub rows: Vec<Value>,
    pub per_node_status: BTreeMap<String, NodeStatus>,
    pub partial: bool,
    pub row_count: usize,
}

impl ResultSet {
    pub fn empty() -> Self {
        Self {
            rows: Vec::new(),
            per_node_status: BTreeMap::new(),
            partial: false,
            row_count: 0,
        }
    }

    /// Sum of all count rows, if this is a count result.
    pub fn count(&self) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r["type"] == "count")
            .and_then(|r| r["count"].as_u64())
    }
}

fn text(row: &Value, key: &str) -> String {
    row.get(key).and_then(Value::as_str).unwrap_or("").to_string()
}

/// Deduplication and ordering key of a row.
pub fn merge_key(row: &Value, fallback_site: &str) -> (String, String, String) {
    let site = || {
        row.get("site_id")
            .and_then(Value::as_str)
            .unwrap_or(fallback_site)
            .to_string()
    };
    match row.get("type").and_then(Value::as_str).unwrap_or("") {
        "image" => (text(row, "guid"), String::new(), String::new()),
        "derived" => (text(row, "guid"), text(row, "algorithm"), String::new()),
        "patient" => (site(), text(row, "pseudonym_id"), String::new()),
        "exam" => (site(), text(row, "exam_id"), String::new()),
        other => (other.to_string(), String::new(), row.to_string()),
    }
}

/// Concatenates, deduplicates by merge key (first wins), sorts ascending and
/// sums count rows. `partial` is set iff some node is not ok.
pub fn merge(parts: Vec<NodeOutcome>) -> ResultSet {
    let mut rows = BTreeMap::new();
    let mut count: Option<u64> = None;
    let mut per_node_status = BTreeMap::new();
    for part in parts {
        for row in part.rows {
            if row.get("type").and_then(Value::as_str) == Some("count") {
                *count.get_or_insert(0) += row["count"].as_u64().unwrap_or(0);
                continue;
            }
            rows.entry(merge_key(&row, &part.site_id)).or_insert(row);
        }
        per_node_status.insert(part.node_id, part.status);
    }
    let mut rows: Vec<Value> = rows.into_values().collect();
    if let Some(n) = count {
        rows.insert(0, json!({"type": "count", "count": n}));
    }
    let partial = per_node_status.values().any(|s| !s.is_ok());
    ResultSet {
        row_count: rows.len(),
        rows,
        per_node_status,
        partial,
    }
}
