//! Federated route-leak detection.
//!
//! ASes label AS triples from their own routing policy, federally train a
//! triple classifier by FedAvg, and record every aggregated update in a
//! hash-chained ledger. The crate also carries the comparison baselines,
//! detection metrics, deployment-coverage analysis and the training cost
//! model.

pub mod analysis;
pub mod baselines;
pub mod exec;
pub mod fedlearn;
pub mod ledger;
pub mod neuralnet;
pub mod topology;
pub mod tripledata;

pub use exec::Execution;
pub use topology::{AsGraph, Asn, Relationship, Role};
pub use tripledata::{ClientDataset, Label, LabeledTriple, Origin, Triple};
