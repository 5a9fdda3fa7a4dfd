//! Demo, test, and benchmark driver for the traceability middleware.
//!
//! The harness boots real middleware instances on loopback ports and
//! drives them four ways: scripted scenarios with expected outcomes,
//! randomized concurrent stress runs checked against a sequential
//! reference model, a latency benchmark that splits each traced
//! operation into its mediation phases, and a provenance dump for
//! inspecting a live daemon.

pub mod bench;
pub mod cluster;
pub mod dump;
pub mod oracle;
pub mod scenario;
pub mod stress;

pub use bench::{run_bench, BenchConfig, BenchRecord, CSV_HEADER};
pub use cluster::{Cluster, StreamPair};
pub use dump::dump_provenance;
pub use oracle::OracleState;
pub use scenario::{ScenarioReport, ScenarioSpec};
pub use stress::{run_stress, StressConfig, StressReport};

/// Failures are split by blame: `Infra` and `Parse` mean the harness
/// could not run (bad script, dead port, filesystem trouble), while
/// `Assertion` means the system under test did something wrong. The CLI
/// maps them to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("infrastructure failure: {0}")]
    Infra(String),
    #[error("assertion failure: {0}")]
    Assertion(String),
}

impl HarnessError {
    pub fn infra(message: impl Into<String>) -> Self {
        HarnessError::Infra(message.into())
    }
}
