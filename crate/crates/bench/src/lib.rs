//! Verification and benchmarking harness for the tidewater engine.
//!
//! [`oracle`] computes reference output by brute force, [`crashtest`]
//! compares crash-free and crash-injected runs, [`run`] measures throughput
//! and latency, and [`report`] turns metrics files into tables.

pub mod crashtest;
pub mod metrics;
pub mod oracle;
pub mod output;
pub mod report;
pub mod run;
