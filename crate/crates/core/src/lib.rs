//! Flexible mixed-criticality scheduling under EDF with virtual deadlines.
//!
//! HI tasks switch to their pessimistic budget one at a time, and LO tasks
//! keep running at reduced service levels that are recomputed at each
//! switch. The crate provides the task model, the off-line schedulability
//! test, run-time service tuning strategies, random workload generation, a
//! deterministic simulator and the batch experiment driver.
//!
//! All timing arithmetic uses exact rationals ([`Rational`]).
//!
//! ```
//! use fmc::{analyze, example_task_set, q};
//!
//! let set = example_task_set();
//! let summary = analyze(&set, None);
//! assert!(summary.schedulable());
//! assert_eq!(summary.x, Some(q(1, 2)));
//! ```

pub mod analysis;
pub mod experiment;
pub mod model;
pub mod rational;
pub mod sim;
pub mod tracegen;
pub mod tuning;

pub use analysis::{analyze, AnalysisContext, AnalysisError, AnalysisSummary};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResult};
pub use model::{example_task_set, Criticality, McTask, McTaskSet, ModelError};
pub use rational::{q, Rational};
pub use sim::{replay_check, simulate, simulate_with, SimError, SimEvent, SimOptions, SimReport};
pub use tracegen::{generate_task_set, generate_trace, GeneratorParams, WorkloadTrace};
pub use tuning::{ModeState, ServiceTuner, StrategyKind, TuningError};
