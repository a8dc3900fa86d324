//! Storage, service and tooling layer over `lorafleet-core`.
//!
//! * [`metastore`]: append-only metadata log with crash recovery.
//! * [`lifecycle`]: policy records and revisions persisted through the log.
//! * [`controlplane`]: operation queue, worker admission and the HTTP API.
//! * [`catalog`]: sharded catalogs of packed adapters.
//! * [`fanout`]: per-tensor directories and load-slice measurement.
//! * [`cli`]: the `lorafleet` command line.

pub mod catalog;
pub mod cli;
pub mod controlplane;
pub mod fanout;
pub mod lifecycle;
pub mod metastore;

pub use lorafleet_core as core;
