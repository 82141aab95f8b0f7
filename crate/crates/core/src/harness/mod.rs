//! Scenario-driven runs: workload generation, fault injection, the static
//! group baseline, metrics and oracle verification.

pub mod bench;
pub mod expect;
pub mod metrics;
pub mod run;
pub mod scenario;
pub mod sweep;
pub mod workload;

pub use expect::{check_expectations, Check};
pub use metrics::{RequestRecord, RunMetrics};
pub use run::{build_inputs, initial_placement, run, verify};
pub use scenario::{Backend, EventKind, EventSpec, Mode, Scenario};
pub use sweep::{fault_sweep, scale_sweep, FaultRow, ScaleOutcome, ScaleRow};
pub use workload::{gen_workload, Request, Workload};
