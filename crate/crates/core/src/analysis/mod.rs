//! Image-analysis services run where the pixels live.
//!
//! Two fixed, versioned stand-in algorithms are provided: a threshold
//! density estimate and a local-maximum microcalcification detector with
//! single-linkage clustering. Both use exact integer arithmetic at their
//! decision boundaries so results never depend on float rounding.

mod cade;
mod density;
mod jobs;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cade::{detect_microcalc, CadeMeasure, CadeParams, CadeResult, Cluster};
pub use density::{measure_density, DensityMeasure, DensityResult};
pub use jobs::{collect, run_job, schedule_jobs, Job, JobStatus, JobTarget, Selection};

use crate::security::Role;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("image too small: {width}x{height} (need at least 3x3)")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("pixel buffer of {actual} bytes does not match {expected}")]
    BadPixels { expected: u64, actual: u64 },
    #[error("unsupported bit depth {0}")]
    BadDepth(u8),
    #[error("no live node holds a replica of {0}")]
    UnplacedImage(String),
    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmId {
    Density,
    Cade,
}

impl AlgorithmId {
    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmId::Density => "density",
            AlgorithmId::Cade => "cade",
        }
    }

    pub fn version(self) -> &'static str {
        match self {
            AlgorithmId::Density => "density/1.0",
            AlgorithmId::Cade => "cade/1.0",
        }
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmId {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "density" => Ok(AlgorithmId::Density),
            "cade" => Ok(AlgorithmId::Cade),
            other => Err(AnalysisError::UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub kind: String,
    pub default: String,
}

/// What a node advertises about an algorithm it offers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmDescriptor {
    pub algorithm_id: AlgorithmId,
    pub version: String,
    pub params: BTreeMap<String, ParamSpec>,
    pub roles: Vec<Role>,
}

pub fn descriptors() -> Vec<AlgorithmDescriptor> {
    let int = |d: &str| ParamSpec {
        kind: "int".into(),
        default: d.into(),
    };
    vec![
        AlgorithmDescriptor {
            algorithm_id: AlgorithmId::Density,
            version: AlgorithmId::Density.version().into(),
            params: BTreeMap::new(),
            roles: vec![Role::Clinician, Role::Epidemiologist, Role::Researcher],
        },
        AlgorithmDescriptor {
            algorithm_id: AlgorithmId::Cade,
            version: AlgorithmId::Cade.version().into(),
            params: [
                ("sigma_k".to_string(), int("3")),
                ("link_distance".to_string(), int("8")),
                ("min_points".to_string(), int("3")),
            ]
            .into_iter()
            .collect(),
            roles: vec![Role::Clinician],
        },
    ]
}

/// Rejects parameters the algorithm does not declare or cannot parse.
pub fn check_params(alg: AlgorithmId, params: &BTreeMap<String, String>) -> Result<(), AnalysisError> {
    match alg {
        AlgorithmId::Density => match params.keys().next() {
            Some(k) => Err(AnalysisError::InvalidParam(format!("density takes no parameter {k:?}"))),
            None => Ok(()),
        },
        AlgorithmId::Cade => CadeParams::from_map(params).map(|_| ()),
    }
}

/// A decoded sample matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMatrix {
    pub width: u32,
    pub height: u32,
    pub bits: u8,
    pub samples: Vec<u16>,
}

impl PixelMatrix {
    pub fn new(width: u32, height: u32, bits: u8, samples: Vec<u16>) -> Self {
        assert_eq!(samples.len(), width as usize * height as usize);
        Self {
            width,
            height,
            bits,
            samples,
        }
    }

    /// Decodes a little-endian blob.
    pub fn from_blob(bytes: &[u8], width: u32, height: u32, bits: u8) -> Result<Self, AnalysisError> {
        let per = crate::model::bytes_per_sample(bits).ok_or(AnalysisError::BadDepth(bits))?;
        let expected = width as u64 * height as u64 * per;
        if expected != bytes.len() as u64 {
            return Err(AnalysisError::BadPixels {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let samples = match bits {
            8 => bytes.iter().map(|&b| b as u16).collect(),
            _ => bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        };
        Ok(Self::new(width, height, bits, samples))
    }

    pub fn to_blob(&self) -> Vec<u8> {
        match self.bits {
            8 => self.samples.iter().map(|&s| s as u8).collect(),
            _ => self.samples.iter().flat_map(|s| s.to_le_bytes()).collect(),
        }
    }

    pub fn max_value(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.samples[y as usize * self.width as usize + x as usize]
    }
}
