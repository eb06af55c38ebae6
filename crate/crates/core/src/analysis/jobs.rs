//! Data-local job placement and execution.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_params, detect_microcalc, measure_density, AlgorithmId, AnalysisError, CadeParams,
    PixelMatrix,
};
use crate::query::{merge, NodeOutcome, NodeStatus, ResultSet};
use crate::store::{Integrity, LocalStore};

/// An image to process with the geometry needed to decode its blob, so a node
/// holding only a replica can run the job without the metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTarget {
    pub guid: String,
    pub width_px: u32,
    pub height_px: u32,
    pub bits_per_sample: u8,
}

/// A selected image and the nodes holding a replica of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub target: JobTarget,
    pub replicas: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub algorithm: AlgorithmId,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub targets: Vec<JobTarget>,
    pub node_id: String,
    pub status: JobStatus,
    pub submitted_by: String,
    #[serde(default)]
    pub results: Vec<Value>,
    /// Per-guid failure messages.
    #[serde(default)]
    pub errors: BTreeMap<String, String>,
}

/// Groups the selection into one job per node, placing each image on the
/// lowest-ordered live node that holds a replica.
pub fn schedule_jobs(
    selection: &[Selection],
    algorithm: AlgorithmId,
    params: &BTreeMap<String, String>,
    live: &BTreeSet<String>,
    submitted_by: &str,
    job_prefix: &str,
) -> Result<Vec<Job>, AnalysisError> {
    check_params(algorithm, params)?;
    let mut per_node: BTreeMap<String, Vec<JobTarget>> = BTreeMap::new();
    for s in selection {
        let node = s
            .replicas
            .iter()
            .filter(|n| live.contains(*n))
            .min()
            .ok_or_else(|| AnalysisError::UnplacedImage(s.target.guid.clone()))?;
        let targets = per_node.entry(node.clone()).or_default();
        if !targets.iter().any(|t| t.guid == s.target.guid) {
            targets.push(s.target.clone());
        }
    }
    Ok(per_node
        .into_iter()
        .map(|(node_id, targets)| Job {
            job_id: format!("{job_prefix}-{node_id}"),
            algorithm,
            params: params.clone(),
            targets,
            node_id,
            status: JobStatus::Queued,
            submitted_by: submitted_by.to_string(),
            results: Vec::new(),
            errors: BTreeMap::new(),
        })
        .collect())
}

fn derived_row(alg: AlgorithmId, guid: &str, measure: Value) -> Value {
    let mut row = json!({
        "type": "derived",
        "algorithm": alg.as_str(),
        "version": alg.version(),
        "guid": guid,
    });
    if let (Some(obj), Value::Object(m)) = (row.as_object_mut(), measure) {
        obj.extend(m);
    }
    row
}

fn run_one(job: &Job, target: &JobTarget, store: &mut LocalStore) -> Result<Value, String> {
    match store.verify(&target.guid).map_err(|e| e.to_string())? {
        Integrity::Ok => {}
        Integrity::Corrupt { expected, actual } => {
            return Err(format!("checksum mismatch: expected {expected}, found {actual}"))
        }
    }
    let blob = store.get_blob(&target.guid).map_err(|e| e.to_string())?;
    let pixels = PixelMatrix::from_blob(&blob, target.width_px, target.height_px, target.bits_per_sample)
        .map_err(|e| e.to_string())?;
    match job.algorithm {
        AlgorithmId::Density => {
            let m = measure_density(&pixels);
            if let Err(e) = store.set_density(&target.guid, m.density) {
                warn!("could not cache density for {}: {e}", target.guid);
            }
            Ok(derived_row(job.algorithm, &target.guid, serde_json::to_value(m).unwrap()))
        }
        AlgorithmId::Cade => {
            let params = CadeParams::from_map(&job.params).map_err(|e| e.to_string())?;
            let m = detect_microcalc(&pixels, &params).map_err(|e| e.to_string())?;
            Ok(derived_row(job.algorithm, &target.guid, serde_json::to_value(m).unwrap()))
        }
    }
}

/// Runs every target of `job` against the local store. A target that fails
/// is recorded in `errors` and marks the job failed; the other targets still
/// produce rows.
pub fn run_job(mut job: Job, store: &mut LocalStore) -> Job {
    job.status = JobStatus::Running;
    for target in job.targets.clone() {
        match run_one(&job, &target, store) {
            Ok(row) => job.results.push(row),
            Err(e) => {
                job.errors.insert(target.guid.clone(), e);
            }
        }
    }
    job.status = if !job.errors.is_empty() {
        JobStatus::Failed
    } else {
        JobStatus::Done
    };
    job
}

/// Merges finished jobs (or per-node failures) into one result set. Per-guid
/// errors mark their node as failed and the result as partial.
pub fn collect(jobs: Vec<(String, Result<Job, NodeStatus>)>) -> ResultSet {
    let parts = jobs
        .into_iter()
        .map(|(node_id, outcome)| match outcome {
            Ok(job) => {
                let status = if job.errors.is_empty() {
                    NodeStatus::Ok
                } else {
                    NodeStatus::Error {
                        message: job
                            .errors
                            .iter()
                            .map(|(g, e)| format!("{g}: {e}"))
                            .collect::<Vec<_>>()
                            .join("; "),
                    }
                };
                NodeOutcome {
                    node_id,
                    site_id: String::new(),
                    status,
                    rows: job.results,
                }
            }
            Err(status) => NodeOutcome {
                node_id,
                site_id: String::new(),
                status,
                rows: Vec::new(),
            },
        })
        .collect();
    merge(parts)
}
