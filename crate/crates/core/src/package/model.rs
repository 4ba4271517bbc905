use serde::{Deserialize, Serialize};

use crate::dataflow::DataflowSpec;

/// Built-in CRUD functions every class may bind without declaring them.
pub const BUILTIN_FUNCTIONS: [&str; 4] = ["new", "get", "update", "delete"];

pub fn is_builtin(name: &str) -> bool {
    BUILTIN_FUNCTIONS.contains(&name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AccessModifier {
    Public,
    Package,
    Private,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    Structured,
    Unstructured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateKeySpec {
    pub name: String,
    pub kind: StateKind,
    pub access: AccessModifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Locality {
    /// State is read and written as if it lived inside the function container.
    Local,
    None,
    Preferred(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consistency {
    ReadYourWrites,
    BoundedStaleness { delta_ms: u64 },
    Strong,
}

/// Declarative non-functional requirements. Every field is optional so that
/// method-level values can override class-level values field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlaSpec {
    /// Guaranteed invocation rate in requests per second.
    pub throughput_rps: Option<u32>,
    /// Target availability as a fraction in (0, 1).
    pub availability: Option<f64>,
    pub locality: Option<Locality>,
    pub consistency: Option<Consistency>,
    pub persistent: Option<bool>,
}

impl SlaSpec {
    pub fn is_empty(&self) -> bool {
        *self == SlaSpec::default()
    }

    /// Field-wise override: values set on `self` win, unset fields fall back
    /// to `base`.
    pub fn overlay(&self, base: &SlaSpec) -> SlaSpec {
        SlaSpec {
            throughput_rps: self.throughput_rps.or(base.throughput_rps),
            availability: self.availability.or(base.availability),
            locality: self.locality.clone().or_else(|| base.locality.clone()),
            consistency: self.consistency.or(base.consistency),
            persistent: self.persistent.or(base.persistent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionBinding {
    pub function: String,
    pub access: AccessModifier,
    pub output_class: Option<String>,
    pub sla: Option<SlaSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub parent: Option<String>,
    pub state_keys: Vec<StateKeySpec>,
    pub functions: Vec<FunctionBinding>,
    pub sla: Option<SlaSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FunctionKind {
    Builtin,
    Task,
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub kind: FunctionKind,
    /// Registered handler id for TASK functions.
    pub handler: Option<String>,
    /// Step graph for MACRO functions.
    pub dataflow: Option<DataflowSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub functions: Vec<FunctionSpec>,
}

impl PackageSpec {
    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.name == name)
    }
}
