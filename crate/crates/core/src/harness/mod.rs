//! Traffic harness: step engine, scenarios, metrics, the golden forwarding
//! check and the isolation fuzzer.

pub mod engine;
pub mod fuzz;
pub mod golden;
pub mod metrics;
pub mod scenario;
pub mod trace;

use thiserror::Error;

use crate::dataplane::DataplaneError;
use crate::orchestrator::OrchestratorError;

pub use engine::{Counters, Engine, EngineError};
pub use fuzz::{verify_isolation, FuzzConfig, FuzzReport, Violation, ViolationKind};
pub use golden::{golden_chain_check, GoldenReport};
pub use metrics::{FlowMetrics, Metrics, Summary};
pub use scenario::{run_exchange, run_scenario, RunResult, Scenario, ScenarioKind};
pub use trace::{Direction, Fate, Location, PacketRecord, TraceEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Dataplane(#[from] DataplaneError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
}
