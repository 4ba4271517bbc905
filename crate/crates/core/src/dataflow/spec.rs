use serde::{Deserialize, Serialize};

/// Where a step's invocation is sent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepTarget {
    /// The object the macro was invoked on.
    Root,
    /// An object bound to a temporary variable by an argument or earlier step.
    Var(String),
    /// A fixed object id.
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepInput {
    Var(String),
    Literal(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataflowStep {
    pub name: String,
    pub target: StepTarget,
    pub function: String,
    pub inputs: Vec<StepInput>,
    pub output_var: Option<String>,
    pub immutable: bool,
}

impl DataflowStep {
    /// Variables this step reads, including its target.
    pub fn reads(&self) -> impl Iterator<Item = &str> {
        let target = match &self.target {
            StepTarget::Var(v) => Some(v.as_str()),
            _ => None,
        };
        target
            .into_iter()
            .chain(self.inputs.iter().filter_map(|i| match i {
                StepInput::Var(v) => Some(v.as_str()),
                StepInput::Literal(_) => None,
            }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataflowSpec {
    /// Names of the macro arguments, available as variables to every step.
    pub args: Vec<String>,
    pub steps: Vec<DataflowStep>,
    /// Variable holding the macro result; defaults to the last step's output.
    pub output: Option<String>,
}

impl DataflowSpec {
    pub fn step(&self, name: &str) -> Option<&DataflowStep> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn all_immutable(&self) -> bool {
        self.steps.iter().all(|s| s.immutable)
    }

    pub fn output_var(&self) -> Option<&str> {
        self.output
            .as_deref()
            .or_else(|| self.steps.last().and_then(|s| s.output_var.as_deref()))
    }
}
