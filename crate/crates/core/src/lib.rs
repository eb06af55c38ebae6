//! Core of a federated mammography grid: data model, ingest and
//! anonymization, replica catalogue and local store, virtual-organisation
//! security, federated query, analysis services, collaborative annotation
//! and the federation protocol.

pub mod analysis;
pub mod collab;
pub mod digest;
pub mod ingest;
pub mod model;
pub mod net;
pub mod node;
pub mod query;
pub mod security;
pub mod store;
pub mod synth;
