//! Fixtures shared by the CLI integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::Value;
use tempfile::TempDir;

use mgvo_cli::config::{CentralConfig, NodeConfig};
use mgvo_cli::daemon::{start_central, start_node, RunningCentral, RunningNode};
use mgvo_core::ingest::mgif::serialize_mgif;
use mgvo_core::ingest::{ingest_case, IngestContext};
use mgvo_core::net::{SimConfig, Transport};
use mgvo_core::node::{NodeSpec, SimFederation};
use mgvo_core::query::{execute_local, merge, parse_query, NodeOutcome, NodeStatus, ResultSet};
use mgvo_core::security::{issue_token, Role};
use mgvo_core::store::LocalStore;
use mgvo_core::synth::SynthCase;

pub const SECRET: &str = "mgvo-acceptance-secret";
pub const SITES: [&str; 3] = ["cambridge", "oxford", "udine"];
pub const INGEST_NOW: u64 = 1_700_000_000;
const FAR_EXPIRY: u64 = 4_102_444_800;

pub fn node_of(site: &str) -> String {
    format!("{site}-gb")
}

/// Matches the secret convention of `SimFederation` so pseudonyms agree.
pub fn node_secret(node: &str) -> String {
    format!("{node}-secret")
}

/// Token valid for both the simulated clock and the wall clock.
pub fn token(subject: &str, role: Role) -> String {
    let roles: BTreeSet<Role> = [role].into();
    issue_token(subject, &roles, FAR_EXPIRY, SECRET.as_bytes(), 0)
        .unwrap()
        .to_wire()
}

pub struct Sim {
    _dirs: Vec<TempDir>,
    pub fed: SimFederation,
}

impl Sim {
    pub fn start(seed: u64) -> Self {
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
        let fed = SimFederation::start(cfg, SECRET.as_bytes(), &specs, 2000).unwrap();
        Self { _dirs: dirs, fed }
    }

    /// Site-local ingest: the owning node reads the case itself.
    pub fn load(&self, cases: &[SynthCase]) {
        for c in cases {
            self.fed.node(&node_of(&c.site)).ingest_raw(&c.case, INGEST_NOW).unwrap();
        }
    }
}

pub struct Tcp {
    _dirs: Vec<TempDir>,
    pub central: Option<RunningCentral>,
    pub nodes: Vec<RunningNode>,
}

impl Tcp {
    pub fn start(heartbeat_ms: u64) -> Self {
        let central = start_central(&CentralConfig {
            listen: "127.0.0.1:0".into(),
            central_secret: SECRET.into(),
            heartbeat_interval_ms: heartbeat_ms,
        })
        .unwrap();
        let dirs: Vec<TempDir> = SITES.iter().map(|_| TempDir::new().unwrap()).collect();
        let nodes = SITES
            .iter()
            .zip(&dirs)
            .map(|(site, dir)| {
                let node_id = node_of(site);
                start_node(&NodeConfig {
                    node_id: node_id.clone(),
                    site_id: site.to_string(),
                    listen: "127.0.0.1:0".into(),
                    advertise: None,
                    central: central.addr(),
                    data_dir: dir.path().to_path_buf(),
                    node_secret: node_secret(&node_id),
                    central_secret: SECRET.into(),
                    token: token(&format!("node:{node_id}"), Role::Admin),
                    heartbeat_interval_ms: heartbeat_ms,
                    query_timeout_ms: 10_000,
                })
                .unwrap()
            })
            .collect();
        Self {
            _dirs: dirs,
            central: Some(central),
            nodes,
        }
    }

    pub fn addr(&self, node_id: &str) -> String {
        self.nodes
            .iter()
            .find(|n| n.gridbox.node_id() == node_id)
            .map(|n| n.addr())
            .unwrap_or_else(|| panic!("no node {node_id}"))
    }

    pub fn central_addr(&self) -> String {
        self.central.as_ref().unwrap().addr()
    }

    pub fn load(&self, cases: &[SynthCase]) {
        for c in cases {
            let node = self.nodes.iter().find(|n| n.gridbox.site_id() == c.site).unwrap();
            node.gridbox.ingest_raw(&c.case, INGEST_NOW).unwrap();
        }
    }

    pub fn shutdown(mut self) {
        for n in self.nodes.drain(..) {
            n.shutdown();
        }
        if let Some(c) = self.central.take() {
            c.shutdown();
        }
    }
}

/// Single store holding every case, anonymized exactly as its site would.
pub fn oracle_store(cases: &[SynthCase], skip_site: Option<&str>) -> (TempDir, LocalStore) {
    let dir = TempDir::new().unwrap();
    let mut store = LocalStore::open(dir.path(), "oracle").unwrap();
    for c in cases.iter().filter(|c| Some(c.site.as_str()) != skip_site) {
        let secret = node_secret(&node_of(&c.site));
        let ctx = IngestContext {
            node_secret: secret.as_bytes(),
            site_id: &c.site,
            now: INGEST_NOW,
        };
        ingest_case(&c.case, &ctx, &mut store).unwrap();
    }
    (dir, store)
}

pub fn oracle(store: &LocalStore, q: &str, role: Role) -> ResultSet {
    merge(vec![NodeOutcome {
        node_id: "oracle".into(),
        site_id: "oracle".into(),
        status: NodeStatus::Ok,
        rows: execute_local(&parse_query(q).unwrap(), store, role),
    }])
}

/// Drops wall-clock dependent keys so runs over different transports compare.
pub fn without_timestamps(v: &mut Value) {
    match v {
        Value::Object(m) => {
            for k in ["created_at", "submitted_at", "last_heartbeat"] {
                m.remove(k);
            }
            m.values_mut().for_each(without_timestamps);
        }
        Value::Array(a) => a.iter_mut().for_each(without_timestamps),
        _ => {}
    }
}

pub type Exec<'a> = &'a dyn Fn(&[String]) -> (i32, String, String);

/// Runs the CLI in-process against `net`.
pub fn in_process(net: &dyn Transport, args: &[String]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["mgvo".to_string()];
    argv.extend(args.iter().cloned());
    let code = mgvo_cli::cli::run(argv, net, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Runs the built `mgvo` binary.
pub fn binary(args: &[String]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mgvo"))
        .args(args)
        .env_remove("MGVO_TOKEN")
        .env_remove("MGVO_NODE")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|s| s.to_string()).collect()
}

pub struct Scenario<'a> {
    pub exec: Exec<'a>,
    /// Transport address of a node id.
    pub addr: &'a dyn Fn(&str) -> String,
    pub cases: &'a [SynthCase],
    pub work_dir: &'a Path,
    /// When false the cases are assumed to be loaded site-locally already.
    pub wire_ingest: bool,
}

/// One recorded step: label, exit code and normalized stdout (or stderr
/// for failures).
pub type Step = (String, i32, String);

impl Scenario<'_> {
    fn step(&self, steps: &mut Vec<Step>, label: &str, node: &str, tok: &str, rest: &[&str]) -> Value {
        let mut a = args(&["--node", &(self.addr)(node), "--token", tok, "--format", "json"]);
        a.extend(rest.iter().map(|s| s.to_string()));
        let (code, out, err) = (self.exec)(&a);
        if code != 0 {
            steps.push((label.into(), code, err.trim().to_string()));
            return Value::Null;
        }
        let mut v: Value = serde_json::from_str(out.trim()).unwrap_or(Value::String(out.clone()));
        without_timestamps(&mut v);
        steps.push((label.into(), code, serde_json::to_string(&v).unwrap()));
        v
    }

    /// Ingest at three nodes, queries by every role, APPLY density and cade,
    /// remote fetch, second-opinion round trip, replication.
    pub fn run(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        let clin: BTreeMap<&str, String> = [("cambridge", "alice"), ("oxford", "carol"), ("udine", "bob")]
            .into_iter()
            .map(|(site, who)| (site, token(who, Role::Clinician)))
            .collect();
        let researcher = token("rita", Role::Researcher);
        let epi = token("eve", Role::Epidemiologist);
        let official = token("otto", Role::Official);
        let admin = token("ops", Role::Admin);

        let mut lfns: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for (i, c) in self.cases.iter().enumerate() {
            let outcome = if self.wire_ingest {
                let path = self.work_dir.join(format!("case{i:03}.mgif"));
                std::fs::write(&path, serialize_mgif(&c.case).unwrap()).unwrap();
                let p = path.to_string_lossy().into_owned();
                self.step(&mut steps, "ingest", &node_of(&c.site), &clin[c.site.as_str()], &["ingest", &p])
            } else {
                let guid = mgvo_core::digest::guid_for(&c.case.pixels);
                serde_json::json!({"guid": guid, "lfn": Value::Null})
            };
            lfns.entry(c.site.clone())
                .or_default()
                .push((outcome["lfn"].as_str().unwrap_or("").to_string(), outcome["guid"].as_str().unwrap_or("").to_string()));
        }
        if !self.wire_ingest {
            let all = self.step(&mut steps, "ls", "oxford-gb", &clin["oxford"], &["catalogue", "ls", "/mgvo/"]);
            for entries in lfns.values_mut() {
                for (lfn, guid) in entries.iter_mut() {
                    if let Some(e) = all.as_array().into_iter().flatten().find(|e| e["guid"] == guid.as_str()) {
                        *lfn = e["lfn"].as_str().unwrap().to_string();
                    }
                }
            }
        }

        let sites = "exam.site_id IN ('cambridge', 'oxford', 'udine')";
        self.step(&mut steps, "q-researcher", "oxford-gb", &researcher, &["query", "SELECT images WHERE image.view = 'CC'"]);
        self.step(
            &mut steps,
            "q-epi",
            "udine-gb",
            &epi,
            &["query", "SELECT patients WHERE patient.age_at_exam BETWEEN 50 AND 64"],
        );
        self.step(
            &mut steps,
            "q-clinician",
            "cambridge-gb",
            &clin["cambridge"],
            &["query", "SELECT patients WHERE patient.parity >= 1"],
        );
        self.step(
            &mut steps,
            "q-official",
            "oxford-gb",
            &official,
            &["query", &format!("SELECT exams WHERE {sites} COUNT")],
        );
        self.step(&mut steps, "q-admin", "oxford-gb", &admin, &["query", "SELECT patients WHERE patient.parity >= 0"]);

        let all_views = "image.view IN ('CC', 'MLO')";
        self.step(
            &mut steps,
            "apply-density",
            "cambridge-gb",
            &researcher,
            &["job", "submit", "--algorithm", "density", "--where", all_views],
        );
        self.step(
            &mut steps,
            "apply-cade",
            "udine-gb",
            &clin["udine"],
            &["job", "submit", "--algorithm", "cade", "--param", "link_distance=8", "--where", all_views],
        );
        self.step(
            &mut steps,
            "q-density",
            "oxford-gb",
            &researcher,
            &["query", "SELECT images WHERE image.density > 0.3"],
        );

        let (cam_lfn, _) = lfns["cambridge"][0].clone();
        let (_, ud_guid) = lfns["udine"][0].clone();
        let (_, ox_guid) = lfns["oxford"][0].clone();
        self.step(&mut steps, "ls", "oxford-gb", &clin["oxford"], &["catalogue", "ls", "/mgvo/"]);
        self.step(&mut steps, "whereis", "oxford-gb", &clin["oxford"], &["catalogue", "whereis", &ud_guid]);

        let out = self.work_dir.join("fetched.raw").to_string_lossy().into_owned();
        self.step(&mut steps, "fetch", "oxford-gb", &clin["oxford"], &["fetch", &cam_lfn, "--out", &out]);
        self.step(&mut steps, "fetch-researcher", "oxford-gb", &researcher, &["fetch", &cam_lfn, "--out", &out]);

        let case = self.step(
            &mut steps,
            "so-request",
            "cambridge-gb",
            &clin["cambridge"],
            &["so", "request", "--image", &cam_lfn, "--site", "udine"],
        );
        let case_id = case["case_id"].as_str().unwrap_or("missing").to_string();
        self.step(&mut steps, "so-list", "udine-gb", &clin["udine"], &["so", "list"]);
        self.step(
            &mut steps,
            "so-annotate-a",
            "cambridge-gb",
            &clin["cambridge"],
            &["so", "annotate", "--case", &case_id, "--label", "malignant", "--region", "1,1;9,1;9,9"],
        );
        self.step(&mut steps, "so-show-b", "udine-gb", &clin["udine"], &["so", "show", "--case", &case_id]);
        self.step(&mut steps, "so-report-early", "udine-gb", &clin["udine"], &["so", "report", "--case", &case_id]);
        self.step(
            &mut steps,
            "so-annotate-b",
            "udine-gb",
            &clin["udine"],
            &["so", "annotate", "--case", &case_id, "--label", "benign", "--region", "2,2;8,2;8,8", "--note", "cyst"],
        );
        self.step(&mut steps, "so-report", "cambridge-gb", &clin["cambridge"], &["so", "report", "--case", &case_id]);

        self.step(
            &mut steps,
            "replicate",
            "oxford-gb",
            &clin["oxford"],
            &["catalogue", "replicate", &ox_guid, "--to", "udine-gb"],
        );
        self.step(&mut steps, "whereis-replicated", "udine-gb", &clin["udine"], &["catalogue", "whereis", &ox_guid]);
        self.step(&mut steps, "verify", "udine-gb", &clin["udine"], &["catalogue", "verify", &ox_guid]);
        steps
    }
}

pub fn step<'a>(steps: &'a [Step], label: &str) -> &'a Step {
    steps
        .iter()
        .find(|s| s.0 == label)
        .unwrap_or_else(|| panic!("no step {label}"))
}

pub fn write_cases(dir: &Path, cases: &[SynthCase]) -> Vec<PathBuf> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.join(format!("c{i}.mgif"));
            std::fs::write(&p, serialize_mgif(&c.case).unwrap()).unwrap();
            p
        })
        .collect()
}
