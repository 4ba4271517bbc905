//! Macro functions: dataflow validation and orchestrated execution on the grid.

mod dag;
mod run;
mod spec;

pub use dag::{build_dag, Dag};
pub(crate) use run::{on_node_crash, on_step_reply, start_macro};
pub use run::{Checkpoint, MacroRuns, StepTrace};
pub use spec::{DataflowSpec, DataflowStep, StepInput, StepTarget};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DataflowError {
    #[error("step `{0}` declared twice")]
    DuplicateStep(String),
    #[error("variable `{0}` bound twice")]
    DuplicateVar(String),
    #[error("step `{step}` reads undefined variable `{var}`")]
    UndefinedVar { step: String, var: String },
    #[error("dependency cycle through step `{0}`")]
    Cycle(String),
    #[error("step `{step}` failed: {cause}")]
    StepFailure { step: String, cause: String },
    #[error("run {0} has mutable steps and cannot be re-executed")]
    NotIdempotent(u64),
    #[error("unknown run {0}")]
    UnknownRun(u64),
    #[error("orchestrator for run {0} is unavailable")]
    OrchestratorDown(u64),
}
