//! Local evaluation of a sub-query against one node's store.

use std::cmp::Ordering;

use serde_json::{json, Value};

use super::parse::{Atom, CmpOp, Cond, Entity, Literal, QueryAst};
use super::QueryError;
use crate::model::{Exam, MammogramImage, PatientRecord, Record, Scalar, Scope};
use crate::security::{may_filter, redact, Role};
use crate::store::LocalStore;

fn compare(value: Scalar<'_>, lit: &Literal) -> Option<Ordering> {
    match (value, lit) {
        (Scalar::Int(a), Literal::Int(b)) => Some(a.cmp(b)),
        (Scalar::Num(a), Literal::Num(b)) => a.partial_cmp(b),
        (Scalar::Num(a), Literal::Int(b)) => a.partial_cmp(&(*b as f64)),
        (Scalar::Str(a), Literal::Str(b)) => Some(a.cmp(b.as_str())),
        (Scalar::Bool(a), Literal::Bool(b)) => Some(a.cmp(b)),
        _ => None,
    }
}

/// Truth of one atom for a value; an absent value never matches.
pub fn eval_cond(value: Option<Scalar<'_>>, cond: &Cond) -> bool {
    let Some(v) = value else { return false };
    match cond {
        Cond::Cmp(op, lit) => match compare(v, lit) {
            None => false,
            Some(ord) => match op {
                CmpOp::Eq => ord == Ordering::Equal,
                CmpOp::Ne => ord != Ordering::Equal,
                CmpOp::Lt => ord == Ordering::Less,
                CmpOp::Le => ord != Ordering::Greater,
                CmpOp::Gt => ord == Ordering::Greater,
                CmpOp::Ge => ord != Ordering::Less,
            },
        },
        Cond::In(items) => items.iter().any(|l| compare(v, l) == Some(Ordering::Equal)),
        Cond::Between(lo, hi) => {
            matches!(compare(v, lo), Some(Ordering::Greater | Ordering::Equal))
                && matches!(compare(v, hi), Some(Ordering::Less | Ordering::Equal))
        }
    }
}

/// A joined chain: patient, then optionally one of its exams and one image.
#[derive(Clone, Copy)]
struct Chain<'a> {
    patient: Option<&'a PatientRecord>,
    exam: Option<&'a Exam>,
    image: Option<&'a MammogramImage>,
}

impl Chain<'_> {
    fn value(&self, atom: &Atom) -> Option<Scalar<'_>> {
        let def = atom.def();
        match def.scope {
            Scope::Patient => self.patient?.field(def.key),
            Scope::Exam => self.exam?.field(def.key),
            Scope::Image => self.image?.field(def.key),
            Scope::Acq => self.image?.acquisition.field(def.key),
        }
    }

    fn matches(&self, predicate: &[Atom]) -> bool {
        predicate.iter().all(|a| eval_cond(self.value(a), &a.cond))
    }
}

/// Deepest join level a query needs.
fn depth(ast: &QueryAst) -> u8 {
    ast.predicate
        .iter()
        .map(|a| a.def().scope.depth())
        .chain(std::iter::once(ast.entity.scope().depth()))
        .max()
        .unwrap_or(0)
}

/// Checks that `role` may run `ast` at all and may filter on each field.
pub fn check_access(ast: &QueryAst, role: Role) -> Result<(), QueryError> {
    for atom in &ast.predicate {
        if !may_filter(role, atom.def(), ast.count_only) {
            return Err(QueryError::Denied(format!(
                "field {} is not visible to role {}",
                atom.field,
                role.as_str()
            )));
        }
    }
    Ok(())
}

fn chains_below<'a>(store: &'a LocalStore, mut chain: Chain<'a>, need: u8, out: &mut dyn FnMut(Chain<'a>) -> bool) -> bool {
    // Extends `chain` down to depth `need`; stops early once `out` says so.
    let level = if chain.image.is_some() {
        2
    } else if chain.exam.is_some() {
        1
    } else {
        0
    };
    if level >= need {
        return out(chain);
    }
    if level == 0 {
        let Some(p) = chain.patient else { return false };
        for e in store.exams_of(&p.pseudonym_id) {
            chain.exam = Some(e);
            if chains_below(store, chain, need, out) {
                return true;
            }
        }
        false
    } else {
        let e = chain.exam.expect("level 1 has an exam");
        for i in store.images_of(&e.exam_id) {
            chain.image = Some(i);
            if out(chain) {
                return true;
            }
        }
        false
    }
}

/// Matching records of the query entity, unredacted, in store order.
pub fn select_records(ast: &QueryAst, store: &LocalStore) -> Vec<Record> {
    let need = depth(ast);
    let mut out = Vec::new();
    let test = |start: Chain<'_>| {
        chains_below(store, start, need, &mut |c: Chain<'_>| c.matches(&ast.predicate))
    };
    match ast.entity {
        Entity::Patients => {
            for p in store.patients() {
                let start = Chain {
                    patient: Some(p),
                    exam: None,
                    image: None,
                };
                if test(start) {
                    out.push(Record::Patient(p.clone()));
                }
            }
        }
        Entity::Exams => {
            for e in store.exams() {
                let start = Chain {
                    patient: store.patient(&e.patient),
                    exam: Some(e),
                    image: None,
                };
                if test(start) {
                    out.push(Record::Exam(e.clone()));
                }
            }
        }
        Entity::Images => {
            for i in store.images() {
                let exam = store.exam(&i.exam);
                let start = Chain {
                    patient: exam.and_then(|e| store.patient(&e.patient)),
                    exam,
                    image: Some(i),
                };
                if test(start) {
                    out.push(Record::Image(i.clone()));
                }
            }
        }
    }
    out
}

/// Evaluates `ast` locally and redacts every row for `role` before it is
/// returned. Count-only queries yield a single count row.
pub fn execute_local(ast: &QueryAst, store: &LocalStore, role: Role) -> Vec<Value> {
    let records = select_records(ast, store);
    if ast.count_only {
        return vec![json!({"type": "count", "count": records.len()})];
    }
    records
        .iter()
        .map(|r| redact(&r.to_json(), role))
        .filter(|v| v.as_object().is_some_and(|o| !o.is_empty()))
        .collect()
}
