//! Federation planner: which nodes receive the sub-query.

use serde::{Deserialize, Serialize};

use super::parse::{CmpOp, Cond, Literal, QueryAst};
use super::QueryError;

/// A data node as seen by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanMember {
    pub node_id: String,
    pub site_id: String,
    pub live: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    /// `(node_id, sub-query)`; every node evaluates the whole conjunction.
    pub sub_queries: Vec<(String, QueryAst)>,
    /// Targeted nodes that are not live; they are reported, not contacted.
    pub unavailable: Vec<String>,
}

/// Site named by an `exam.site_id = '...'` atom, if any.
pub fn pruned_site(ast: &QueryAst) -> Option<&str> {
    ast.predicate.iter().find_map(|a| match (&a.field[..], &a.cond) {
        ("exam.site_id", Cond::Cmp(CmpOp::Eq, Literal::Str(s))) => Some(s.as_str()),
        _ => None,
    })
}

pub fn plan(ast: &QueryAst, members: &[PlanMember]) -> Result<QueryPlan, QueryError> {
    if !members.iter().any(|m| m.live) {
        return Err(QueryError::NoNodesAvailable);
    }
    let site = pruned_site(ast);
    let mut targets: Vec<&PlanMember> = members
        .iter()
        .filter(|m| site.is_none_or(|s| m.site_id == s))
        .collect();
    targets.sort_by(|a, b| a.node_id.cmp(&b.node_id));
    let mut out = QueryPlan {
        sub_queries: Vec::new(),
        unavailable: Vec::new(),
    };
    for m in targets {
        if m.live {
            out.sub_queries.push((m.node_id.clone(), ast.clone()));
        } else {
            out.unavailable.push(m.node_id.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;

    fn members() -> Vec<PlanMember> {
        ["cambridge", "udine", "oxford"]
            .iter()
            .map(|s| PlanMember {
                node_id: format!("n-{s}"),
                site_id: s.to_string(),
                live: true,
            })
            .collect()
    }

    #[test]
    fn broadcast() {
        let q = parse_query("SELECT images WHERE image.view = 'CC'").unwrap();
        let p = plan(&q, &members()).unwrap();
        assert_eq!(p.sub_queries.len(), 3);
        assert!(p.sub_queries.iter().all(|(_, sq)| *sq == q));
    }

    #[test]
    fn site_pruning() {
        let q = parse_query("SELECT images WHERE exam.site_id = 'udine'").unwrap();
        let p = plan(&q, &members()).unwrap();
        let targets: Vec<_> = p.sub_queries.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(targets, vec!["n-udine"]);
    }

    #[test]
    fn dead_targets_are_listed() {
        let mut m = members();
        m[1].live = false;
        let q = parse_query("SELECT images WHERE image.view = 'CC'").unwrap();
        let p = plan(&q, &m).unwrap();
        assert_eq!(p.sub_queries.len(), 2);
        assert_eq!(p.unavailable, vec!["n-udine"]);
    }

    #[test]
    fn no_nodes() {
        let q = parse_query("SELECT images WHERE image.view = 'CC'").unwrap();
        assert_eq!(plan(&q, &[]), Err(QueryError::NoNodesAvailable));
    }
}
