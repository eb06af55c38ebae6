//! Local query execution against a brute-force scan over joined JSON rows.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use mgvo_core::ingest::{ingest_case, IngestContext};
use mgvo_core::model::Record;
use mgvo_core::query::{execute_local, parse_query, select_records, CmpOp, Cond, Entity, Literal, QueryAst};
use mgvo_core::security::Role;
use mgvo_core::store::LocalStore;
use mgvo_core::synth::{generate, random_query, SynthOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn cmp_json(v: &Value, lit: &Literal) -> Option<Ordering> {
    match lit {
        Literal::Int(i) => v.as_f64()?.partial_cmp(&(*i as f64)),
        Literal::Num(n) => v.as_f64()?.partial_cmp(n),
        Literal::Str(s) => Some(v.as_str()?.cmp(s.as_str())),
        Literal::Bool(b) => Some(v.as_bool()?.cmp(b)),
    }
}

fn holds(v: Option<&Value>, cond: &Cond) -> bool {
    let Some(v) = v.filter(|v| !v.is_null()) else { return false };
    match cond {
        Cond::Cmp(op, lit) => {
            let Some(o) = cmp_json(v, lit) else { return false };
            match op {
                CmpOp::Eq => o.is_eq(),
                CmpOp::Ne => o.is_ne(),
                CmpOp::Lt => o.is_lt(),
                CmpOp::Le => o.is_le(),
                CmpOp::Gt => o.is_gt(),
                CmpOp::Ge => o.is_ge(),
            }
        }
        Cond::In(items) => items.iter().any(|l| cmp_json(v, l) == Some(Ordering::Equal)),
        Cond::Between(lo, hi) => {
            cmp_json(v, lo).is_some_and(|o| o.is_ge()) && cmp_json(v, hi).is_some_and(|o| o.is_le())
        }
    }
}

/// (patient, exam, image) rows; missing levels are `Null`.
struct Joined {
    chains: Vec<[Value; 3]>,
}

impl Joined {
    fn build(store: &LocalStore) -> Self {
        let mut chains = Vec::new();
        for p in store.patients() {
            let pj = serde_json::to_value(p).unwrap();
            chains.push([pj.clone(), Value::Null, Value::Null]);
            for e in store.exams().filter(|e| e.patient == p.pseudonym_id) {
                let ej = serde_json::to_value(e).unwrap();
                chains.push([pj.clone(), ej.clone(), Value::Null]);
                for i in store.images().filter(|i| i.exam == e.exam_id) {
                    chains.push([pj.clone(), ej.clone(), serde_json::to_value(i).unwrap()]);
                }
            }
        }
        Self { chains }
    }

    fn answer(&self, q: &QueryAst) -> BTreeSet<String> {
        let level = |f: &str| match f.split('.').next().unwrap() {
            "patient" => 0,
            "exam" => 1,
            _ => 2,
        };
        let entity_level = match q.entity {
            Entity::Patients => 0,
            Entity::Exams => 1,
            Entity::Images => 2,
        };
        let depth = q.predicate.iter().map(|a| level(&a.field)).chain([entity_level]).max().unwrap();
        let mut out = BTreeSet::new();
        for chain in &self.chains {
            let len = chain.iter().take_while(|v| !v.is_null()).count();
            if len != depth + 1 {
                continue;
            }
            let ok = q.predicate.iter().all(|a| {
                let (scope, key) = a.field.split_once('.').unwrap();
                let v = match scope {
                    "patient" => chain[0].get(key),
                    "exam" => chain[1].get(key),
                    "image" => chain[2].get(key),
                    _ => chain[2].get("acquisition").and_then(|acq| acq.get(key)),
                };
                holds(v, &a.cond)
            });
            if ok {
                let id = match q.entity {
                    Entity::Patients => &chain[0]["pseudonym_id"],
                    Entity::Exams => &chain[1]["exam_id"],
                    Entity::Images => &chain[2]["guid"],
                };
                out.insert(id.as_str().unwrap().to_string());
            }
        }
        out
    }
}

fn key(r: &Record) -> String {
    match r {
        Record::Patient(p) => p.pseudonym_id.clone(),
        Record::Exam(e) => e.exam_id.clone(),
        Record::Image(i) => i.guid.clone(),
    }
}

#[test]
fn local_execution_matches_brute_force_scan() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = LocalStore::open(dir.path(), "n1").unwrap();
    let sites = ["alpha", "beta"];
    let opts = SynthOptions::new(11, &sites, 620);
    for c in generate(&opts) {
        let ctx = IngestContext {
            node_secret: b"k",
            site_id: &c.site,
            now: 0,
        };
        ingest_case(&c.case, &ctx, &mut store).unwrap();
    }
    let total = store.patients().count() + store.exams().count() + store.images().count();
    assert!(total >= 1000, "only {total} records");

    let oracle = Joined::build(&store);
    let site_names: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut non_empty = 0;
    for _ in 0..200 {
        let text = random_query(&mut rng, &site_names);
        let q = parse_query(&text).unwrap();
        let expected = oracle.answer(&q);
        let got: BTreeSet<String> = select_records(&q, &store).iter().map(key).collect();
        assert_eq!(got, expected, "{text}");
        if q.count_only {
            let rows = execute_local(&q, &store, Role::Official);
            assert_eq!(rows[0]["count"].as_u64().unwrap() as usize, expected.len(), "{text}");
        }
        non_empty += usize::from(!expected.is_empty());
    }
    assert!(non_empty > 50, "queries too selective: {non_empty}");
}

#[test]
fn researcher_rows_carry_no_clinical_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = LocalStore::open(dir.path(), "n1").unwrap();
    for c in generate(&SynthOptions::new(3, &["alpha"], 40)) {
        let ctx = IngestContext {
            node_secret: b"k",
            site_id: "alpha",
            now: 0,
        };
        ingest_case(&c.case, &ctx, &mut store).unwrap();
    }
    let q = parse_query("SELECT patients WHERE patient.age_at_exam >= 0").unwrap();
    let rows = execute_local(&q, &store, Role::Researcher);
    assert!(!rows.is_empty());
    for row in rows {
        for clin in ["clinical_history", "family_history", "hrt_use", "parity", "diet_code"] {
            assert!(row.get(clin).is_none(), "{clin} in {row}");
        }
        assert!(row["age_at_exam"].as_str().unwrap().contains('-'));
    }
}
