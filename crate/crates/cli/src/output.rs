//! Canonical JSON and aligned-table rendering.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Table,
}

/// One-line JSON with object keys sorted.
pub fn canonical<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("json")
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Rows as a table whose columns are the sorted union of the rows' keys.
/// Non-object rows render in a single `value` column.
pub fn table(rows: &[Value]) -> String {
    let mut columns = BTreeSet::new();
    for r in rows {
        match r.as_object() {
            Some(o) => columns.extend(o.keys().cloned()),
            None => {
                columns.insert("value".to_string());
            }
        }
    }
    let columns: Vec<String> = columns.into_iter().collect();
    let grid: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            columns
                .iter()
                .map(|c| match r.as_object() {
                    Some(o) => o.get(c).map(cell).unwrap_or_default(),
                    None => cell(r),
                })
                .collect()
        })
        .collect();
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| grid.iter().map(|row| row[i].chars().count()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut out = vec![line(&columns)];
    out.extend(grid.iter().map(|r| line(r)));
    out.join("\n") + "\n"
}

/// A single object as a two-column `field  value` table.
pub fn record<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let rows: Vec<Value> = match v {
        Value::Object(m) => m
            .into_iter()
            .map(|(k, v)| serde_json::json!({"field": k, "value": cell(&v)}))
            .collect(),
        other => vec![other],
    };
    table(&rows)
}
