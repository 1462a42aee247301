//! Test harness for the tilebt translator: golden programs, a random
//! program generator, differential execution, per-tile fidelity and
//! code-size metrics.

pub mod corpus;
pub mod diff;
pub mod fidelity;
pub mod gen;
pub mod metrics;
pub mod programs;
pub mod sidecar;
