//! Three Grid-boxes and a central node on the simulated network.

use std::collections::BTreeMap;

use mgvo_core::analysis::{measure_density, AlgorithmId, PixelMatrix};
use mgvo_core::digest::guid_for;
use mgvo_core::collab::Label;
use mgvo_core::ingest::{ingest_case, mgif::serialize_mgif, IngestContext};
use mgvo_core::net::{MsgType, NodeState, SimConfig, Transport};
use mgvo_core::node::{ClientError, ErrorCode, NodeSpec, SimFederation};
use mgvo_core::query::{check_access, execute_local, merge, parse_query, NodeOutcome, NodeStatus, ResultSet};
use mgvo_core::security::Role;
use mgvo_core::store::LocalStore;
use mgvo_core::synth::{generate, random_query, SynthCase, SynthOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const SITES: [&str; 3] = ["cambridge", "oxford", "udine"];
const NOW: u64 = 1_700_000_000;
const ALL_VIEWS: &str = "image.view IN ('CC', 'MLO')";

fn node_of(site: &str) -> String {
    format!("{site}-gb")
}

struct World {
    _dirs: Vec<TempDir>,
    fed: SimFederation,
    cases: Vec<SynthCase>,
}

fn world(seed: u64, images: usize) -> World {
    let dirs: Vec<TempDir> = SITES.iter().map(|_| TempDir::new().unwrap()).collect();
    let specs: Vec<NodeSpec> = SITES
        .iter()
        .zip(&dirs)
        .map(|(s, d)| NodeSpec {
            node_id: node_of(s),
            site_id: s.to_string(),
            data_dir: d.path().to_path_buf(),
        })
        .collect();
    let cfg = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let fed = SimFederation::start(cfg, b"central-secret", &specs, 2000).unwrap();
    let cases = generate(&SynthOptions::new(seed, &SITES, images));
    for c in &cases {
        fed.node(&node_of(&c.site)).ingest_raw(&c.case, NOW).unwrap();
    }
    World { _dirs: dirs, fed, cases }
}

fn oracle_store(cases: &[SynthCase], dir: &TempDir, skip_site: Option<&str>) -> LocalStore {
    let mut store = LocalStore::open(dir.path(), "oracle").unwrap();
    for c in cases.iter().filter(|c| Some(c.site.as_str()) != skip_site) {
        let secret = format!("{}-secret", node_of(&c.site));
        let ctx = IngestContext {
            node_secret: secret.as_bytes(),
            site_id: &c.site,
            now: NOW,
        };
        ingest_case(&c.case, &ctx, &mut store).unwrap();
    }
    store
}

fn oracle(store: &LocalStore, q: &str, role: Role) -> ResultSet {
    let ast = parse_query(q).unwrap();
    merge(vec![NodeOutcome {
        node_id: "oracle".into(),
        site_id: "oracle".into(),
        status: NodeStatus::Ok,
        rows: execute_local(&ast, store, role),
    }])
}

#[test]
fn discovery_lists_three_live_nodes() {
    let w = world(1, 10);
    let m = w.fed.central.membership(w.fed.net.now_ms());
    assert_eq!(m.nodes.len(), 3);
    assert_eq!(m.live().count(), 3);
    let admin = w.fed.token("ops", &[Role::Admin]);
    let seen = mgvo_core::node::Client::new(&w.fed.net, "central", &admin).discover().unwrap();
    assert_eq!(seen.nodes.len(), 3);
}

#[test]
fn federated_rows_equal_union_oracle() {
    let w = world(7, 400);
    let odir = TempDir::new().unwrap();
    let store = oracle_store(&w.cases, &odir, None);
    let sites: Vec<String> = SITES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (role, subject) in [(Role::Researcher, "rita"), (Role::Clinician, "carl")] {
        let token = w.fed.token(subject, &[role]);
        for i in 0..30 {
            let q = random_query(&mut rng, &sites);
            let entry = node_of(SITES[i % 3]);
            let allowed = check_access(&parse_query(&q).unwrap(), role).is_ok();
            let got = match w.fed.client(&entry, &token).query(&q) {
                Err(ClientError::Remote(e)) if !allowed && e.code == ErrorCode::Denied => continue,
                other => other.unwrap(),
            };
            assert!(allowed && !got.partial, "{q}");
            assert_eq!(got.rows, oracle(&store, &q, role).rows, "{q} via {entry}");
        }
    }
}

#[test]
fn count_queries_sum_across_nodes() {
    let w = world(3, 120);
    let token = w.fed.token("ofelia", &[Role::Official]);
    let rs = w.fed.client("udine-gb", &token).query("SELECT images WHERE exam.site_id IN ('cambridge', 'oxford', 'udine') COUNT").unwrap();
    assert_eq!(rs.rows, vec![serde_json::json!({"type": "count", "count": 120})]);
}

#[test]
fn simple_queries_ship_no_image_bytes() {
    let w = world(5, 60);
    let token = w.fed.token("rita", &[Role::Researcher]);
    w.fed.net.reset_counters();
    let rs = w.fed.client("oxford-gb", &token).query("SELECT images WHERE image.view = 'CC'").unwrap();
    assert!(rs.row_count > 0);
    let c = w.fed.net.counters();
    assert_eq!(c.get(MsgType::ImageChunk).frames, 0);
    assert_eq!(c.get(MsgType::SubQueryRequest).frames, 3);
}

#[test]
fn apply_density_runs_one_job_per_owner() {
    let w = world(11, 90);
    let token = w.fed.token("rita", &[Role::Researcher]);
    w.fed.net.reset_counters();
    let client = w.fed.client("cambridge-gb", &token);
    let rs = client.job_submit(AlgorithmId::Density, &BTreeMap::new(), ALL_VIEWS).unwrap();
    let c = w.fed.net.counters();
    assert_eq!(c.get(MsgType::JobSubmit).frames, 3);
    assert_eq!(c.get(MsgType::ImageChunk).frames, 0);
    assert_eq!(rs.row_count, 90);
    assert!(!rs.partial);
    for row in &rs.rows {
        let guid = row["guid"].as_str().unwrap();
        let case = &w.cases.iter().find(|c| guid_for(&c.case.pixels) == guid).unwrap().case;
        let d = &case.image;
        let expected = measure_density(&PixelMatrix::from_blob(&case.pixels, d.width, d.height, d.bits).unwrap()).density;
        assert_eq!(row["density"].as_f64(), Some(expected), "{row}");
    }
}

#[test]
fn remote_fetch_is_relayed_and_checked() {
    let w = world(13, 30);
    let token = w.fed.token("carl", &[Role::Clinician]);
    let remote = w.cases.iter().find(|c| c.site == "udine").unwrap();
    let guid = guid_for(&remote.case.pixels);
    let lfn = w.fed.node("udine-gb").store().catalogue().lookup_guid(&guid).unwrap().lfn;
    let got = w.fed.client("oxford-gb", &token).fetch(&lfn).unwrap();
    assert_eq!(got.data, remote.case.pixels);

    let researcher = w.fed.token("rita", &[Role::Researcher]);
    let err = w.fed.client("oxford-gb", &researcher).fetch(&lfn).unwrap_err();
    assert!(matches!(err, ClientError::Remote(ref e) if e.code == ErrorCode::Denied), "{err}");
}

#[test]
fn wire_ingest_then_duplicate() {
    let w = world(17, 0);
    let token = w.fed.token("carl", &[Role::Clinician]);
    let case = generate(&SynthOptions::new(1, &["oxford"], 1)).remove(0).case;
    let bytes = serialize_mgif(&case).unwrap();
    let c = w.fed.client("oxford-gb", &token);
    let first = c.ingest(&bytes).unwrap();
    assert!(!first.duplicate);
    assert!(first.lfn.starts_with("/mgvo/oxford/"));
    assert!(c.ingest(&bytes).unwrap().duplicate);
    assert_eq!(c.ls("/mgvo/").unwrap().len(), 1);
}

#[test]
fn second_opinion_round_trip_is_blind() {
    let w = world(19, 12);
    let alice = w.fed.token("alice", &[Role::Clinician]);
    let bob = w.fed.token("bob", &[Role::Clinician]);
    let img = w.cases.iter().find(|c| c.site == "cambridge").unwrap();
    let guid = guid_for(&img.case.pixels);
    let lfn = w.fed.node("cambridge-gb").store().catalogue().lookup_guid(&guid).unwrap().lfn;

    let a = w.fed.client("cambridge-gb", &alice);
    let b = w.fed.client("udine-gb", &bob);
    let case = a.so_request(&lfn, "udine").unwrap();
    assert_eq!(case.case_id, "cambridge-gb:1");
    let listed = b.so_list().unwrap();
    assert_eq!(listed.len(), 1);
    assert_eq!(listed[0].case_id, case.case_id);

    a.annotate(&case.case_id, Label::Mass, vec![(1, 1), (5, 1), (5, 5)], "upper outer")
        .unwrap();
    let seen_by_b = b.so_get(&case.case_id).unwrap();
    assert!(seen_by_b.annotations.is_empty(), "blind reading leaked");
    let err = b.so_report(&case.case_id).unwrap_err();
    assert!(matches!(err, ClientError::Remote(ref e) if e.code == ErrorCode::NotReady), "{err}");

    b.annotate(&case.case_id, Label::Mass, vec![(2, 2), (6, 2), (6, 6)], "").unwrap();
    let report = a.so_report(&case.case_id).unwrap();
    assert!(report.agreement);
    assert_eq!(report.annotations.len(), 2);
    assert_eq!(b.so_report(&case.case_id).unwrap(), report);
}

#[test]
fn replication_verify_and_corruption() {
    let w = world(23, 9);
    let token = w.fed.token("carl", &[Role::Clinician]);
    let src = w.cases.iter().find(|c| c.site == "oxford").unwrap();
    let guid = guid_for(&src.case.pixels);
    let c = w.fed.client("oxford-gb", &token);
    c.replicate(&guid, "udine-gb").unwrap();
    let replicas = c.whereis(&guid).unwrap();
    let holders: Vec<_> = replicas.iter().map(|r| r.node_id.as_str()).collect();
    assert_eq!(holders, ["oxford-gb", "udine-gb"]);
    let at_udine = w.fed.client("udine-gb", &token).verify(&guid).unwrap();
    let at_oxford = c.verify(&guid).unwrap();
    assert!(at_udine.ok && at_oxford.ok);
    assert_eq!(at_udine.actual, at_oxford.actual);

    // Flip one byte of the udine copy.
    let path = {
        let store = w.fed.node("udine-gb").store();
        store.dir().join(LocalStore::blob_relpath(&guid))
    };
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(!w.fed.client("udine-gb", &token).verify(&guid).unwrap().ok);
    let lfn = c.lookup(&src_lfn(&w, &guid)).unwrap().lfn;
    let err = w.fed.client("udine-gb", &token).fetch(&lfn).unwrap_err();
    assert!(matches!(err, ClientError::ChecksumMismatch { .. }), "{err}");
}

fn src_lfn(w: &World, guid: &str) -> String {
    w.fed.node("oxford-gb").store().catalogue().lookup_guid(guid).unwrap().lfn
}

#[test]
fn silent_node_goes_dead_and_queries_turn_partial() {
    let w = world(29, 150);
    let token = w.fed.token("rita", &[Role::Researcher]);
    w.fed.net.silence_heartbeats("udine-gb");
    w.fed.net.advance(3 * 2000 + 2000);
    let m = w.fed.central.membership(w.fed.net.now_ms());
    assert_eq!(m.get("udine-gb").unwrap().status, NodeState::Dead);
    let q = "SELECT images WHERE image.view = 'MLO'";
    let rs = w.fed.client("oxford-gb", &token).query(q).unwrap();
    assert!(rs.partial);
    assert_eq!(rs.per_node_status["udine-gb"], NodeStatus::error("node unavailable"));
    let odir = TempDir::new().unwrap();
    let restricted = oracle_store(&w.cases, &odir, Some("udine"));
    assert_eq!(rs.rows, oracle(&restricted, q, Role::Researcher).rows);

    w.fed.net.heal("udine-gb");
    w.fed.net.advance(2 * 2000);
    assert!(!w.fed.client("oxford-gb", &token).query(q).unwrap().partial);
}

#[test]
fn same_seed_same_trace() {
    let run = || {
        let w = world(31, 40);
        let token = w.fed.token("rita", &[Role::Researcher]);
        let c = w.fed.client("cambridge-gb", &token);
        let a = c.query("SELECT patients WHERE patient.age_at_exam >= 50").unwrap();
        let b = c.job_submit(AlgorithmId::Density, &BTreeMap::new(), "image.view = 'CC'").unwrap();
        w.fed.net.advance(10_000);
        (
            serde_json::to_string(&(a, b)).unwrap(),
            w.fed.net.trace_digest(),
            format!("{:?}", w.fed.net.counters()),
        )
    };
    assert_eq!(run(), run());
}
