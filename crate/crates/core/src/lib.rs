//! Allocation-only core of lorafleet.
//!
//! Everything here is deterministic and free of IO: the packed adapter
//! container codec, adapter lifecycle state machines, the time-sliced trainer
//! model, the serving simulator with its cache tiers and cold loader, and the
//! traffic generators and metric reducers that drive it. The `lorafleet`
//! crate layers files, the metadata log, the control plane and the CLI on top.

#![no_std]
#![deny(rust_2018_idioms)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checksum;
pub mod lifecycle;
pub mod loadgen;
pub mod packfmt;
pub mod servesim;
pub mod trainersim;

/// Milliseconds on a simulated or wall clock.
pub type Millis = u64;
