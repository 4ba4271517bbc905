//! Package file reader and writer.
//!
//! The file format is the YAML layout used by OaaS package definitions:
//!
//! ```yaml
//! name: multimedia
//! classes:
//!   - name: video
//!     parent: media            # optional, single inheritance
//!     qos: { availability: 99.9, throughput: 100, consistency: STRONG }
//!     constraint: { persistent: true }
//!     stateSpec:
//!       keySpecs:
//!         - { name: mp4, access: PUBLIC, kind: unstructured }
//!     functions:
//!       - function: transcode  # `name:` is accepted as well
//!         access: PUBLIC
//!         outputCls: .video
//!         qos: { throughput: 50 }
//! functions:
//!   - name: transcode
//!     type: TASK
//!     image: transcode-py:latest   # accepted and ignored
//!     handler: echo
//! ```
//!
//! `keySpecs` may also sit directly under a class. Function bindings whose
//! name is neither a built-in nor declared under `functions` are treated as
//! TASK functions whose handler id is the function name.

use serde::{Deserialize, Serialize};

use super::model::*;
use super::PackageError;
use crate::dataflow::{DataflowSpec, DataflowStep, StepInput, StepTarget};

const DEFAULT_PACKAGE_NAME: &str = "default";

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPackage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default)]
    classes: Vec<RawClass>,
    #[serde(default)]
    functions: Vec<RawFunction>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct RawClass {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_spec: Option<RawStateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_specs: Option<Vec<RawKeySpec>>,
    #[serde(default)]
    functions: Vec<RawBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qos: Option<RawQos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraint: Option<RawConstraint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct RawStateSpec {
    #[serde(default)]
    key_specs: Vec<RawKeySpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeySpec {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    access: Option<AccessModifier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<StateKind>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct RawBinding {
    #[serde(alias = "name")]
    function: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    access: Option<AccessModifier>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_cls: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qos: Option<RawQos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constraint: Option<RawConstraint>,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    image: Option<String>,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    description: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQos {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    throughput: Option<i64>,
    /// Percent, e.g. `99.9`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    availability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    locality: Option<RawLocality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    consistency: Option<String>,
    /// Staleness bound in seconds, required with `BOUNDED_STALENESS`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    staleness: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLocality {
    Mode(String),
    Preferred(Vec<String>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    persistent: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFunction {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    image: Option<String>,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    handler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataflow: Option<RawDataflow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataflow {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    args: Vec<String>,
    steps: Vec<RawStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    name: String,
    target: String,
    function: String,
    #[serde(default)]
    inputs: Vec<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_var: Option<String>,
    #[serde(default)]
    immutable: bool,
}

fn schema(msg: impl Into<String>) -> PackageError {
    PackageError::Schema(msg.into())
}

/// Parses package-file text into a [`PackageSpec`].
pub fn parse_package(text: &str) -> Result<PackageSpec, PackageError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| PackageError::Syntax(e.to_string()))?;
    if value.is_null() {
        return Ok(PackageSpec {
            name: DEFAULT_PACKAGE_NAME.into(),
            classes: vec![],
            functions: vec![],
        });
    }
    let raw: RawPackage = serde_yaml::from_value(value).map_err(|e| schema(e.to_string()))?;
    from_raw(raw)
}

fn from_raw(raw: RawPackage) -> Result<PackageSpec, PackageError> {
    let name = raw.name.unwrap_or_else(|| DEFAULT_PACKAGE_NAME.into());
    check_ident(&name)?;

    let mut functions = Vec::with_capacity(raw.functions.len());
    for f in raw.functions {
        functions.push(function_from_raw(f)?);
    }
    for (i, f) in functions.iter().enumerate() {
        if functions[..i].iter().any(|g| g.name == f.name) {
            return Err(schema(format!("function `{}` declared twice", f.name)));
        }
    }

    let mut classes = Vec::with_capacity(raw.classes.len());
    for c in raw.classes {
        let class = class_from_raw(c)?;
        if classes.iter().any(|k: &ClassSpec| k.name == class.name) {
            return Err(schema(format!("class `{}` declared twice", class.name)));
        }
        classes.push(class);
    }

    // Bindings that name neither a built-in nor a declared function are
    // implicitly TASK functions handled by a handler of the same name.
    for class in &classes {
        for b in &class.functions {
            if !is_builtin(&b.function) && !functions.iter().any(|f| f.name == b.function) {
                functions.push(FunctionSpec {
                    name: b.function.clone(),
                    kind: FunctionKind::Task,
                    handler: Some(b.function.clone()),
                    dataflow: None,
                });
            }
        }
    }

    Ok(PackageSpec {
        name,
        classes,
        functions,
    })
}

fn check_ident(name: &str) -> Result<(), PackageError> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(schema(format!("invalid identifier `{name}`")))
    }
}

fn function_from_raw(f: RawFunction) -> Result<FunctionSpec, PackageError> {
    check_ident(&f.name)?;
    let kind = match f.kind.to_ascii_uppercase().as_str() {
        "BUILTIN" => FunctionKind::Builtin,
        "TASK" => FunctionKind::Task,
        "MACRO" => FunctionKind::Macro,
        other => return Err(schema(format!("unknown function type `{other}`"))),
    };
    match kind {
        FunctionKind::Builtin if !is_builtin(&f.name) => {
            return Err(schema(format!(
                "`{}` is not a built-in function (expected one of {:?})",
                f.name, BUILTIN_FUNCTIONS
            )))
        }
        FunctionKind::Macro if f.dataflow.is_none() => {
            return Err(schema(format!("macro `{}` has no dataflow block", f.name)))
        }
        FunctionKind::Task | FunctionKind::Builtin if f.dataflow.is_some() => {
            return Err(schema(format!(
                "`{}`: only MACRO functions take a dataflow",
                f.name
            )))
        }
        _ => {}
    }
    let dataflow = f.dataflow.map(dataflow_from_raw).transpose()?;
    if let Some(df) = &dataflow {
        crate::dataflow::build_dag(df).map_err(|e| schema(format!("macro `{}`: {e}", f.name)))?;
    }
    let handler = match kind {
        FunctionKind::Task => Some(f.handler.unwrap_or_else(|| f.name.clone())),
        _ => f.handler,
    };
    Ok(FunctionSpec {
        name: f.name,
        kind,
        handler,
        dataflow,
    })
}

fn dataflow_from_raw(d: RawDataflow) -> Result<DataflowSpec, PackageError> {
    let steps = d
        .steps
        .into_iter()
        .map(|s| {
            let target = match s.target.strip_prefix('$') {
                Some("self") => StepTarget::Root,
                Some(var) if !var.is_empty() => StepTarget::Var(var.to_string()),
                Some(_) => return Err(schema(format!("step `{}`: empty target variable", s.name))),
                None => StepTarget::Object(s.target),
            };
            let inputs = s
                .inputs
                .into_iter()
                .map(|v| match v.as_str().and_then(|t| t.strip_prefix('$')) {
                    Some(var) => StepInput::Var(var.to_string()),
                    None => StepInput::Literal(v),
                })
                .collect();
            Ok(DataflowStep {
                name: s.name,
                target,
                function: s.function,
                inputs,
                output_var: s.output_var,
                immutable: s.immutable,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(DataflowSpec {
        args: d.args,
        steps,
        output: d.output,
    })
}

fn class_from_raw(c: RawClass) -> Result<ClassSpec, PackageError> {
    check_ident(&c.name)?;
    let mut keys = Vec::new();
    let nested = c.state_spec.map(|s| s.key_specs).unwrap_or_default();
    for k in nested.into_iter().chain(c.key_specs.unwrap_or_default()) {
        check_ident(&k.name)?;
        if keys.iter().any(|e: &StateKeySpec| e.name == k.name) {
            return Err(schema(format!(
                "class `{}`: key `{}` declared twice",
                c.name, k.name
            )));
        }
        keys.push(StateKeySpec {
            name: k.name,
            kind: k.kind.unwrap_or(StateKind::Unstructured),
            access: k.access.unwrap_or(AccessModifier::Public),
        });
    }

    let mut bindings: Vec<FunctionBinding> = Vec::new();
    for b in c.functions {
        if bindings.iter().any(|e| e.function == b.function) {
            return Err(schema(format!(
                "class `{}`: function `{}` bound twice",
                c.name, b.function
            )));
        }
        check_ident(&b.function)?;
        bindings.push(FunctionBinding {
            function: b.function,
            access: b.access.unwrap_or(AccessModifier::Public),
            output_class: b.output_cls.map(|o| o.trim_start_matches('.').to_string()),
            sla: sla_from_raw(b.qos, b.constraint)?,
        });
    }

    Ok(ClassSpec {
        name: c.name,
        parent: c.parent.map(|p| p.trim_start_matches('.').to_string()),
        state_keys: keys,
        functions: bindings,
        sla: sla_from_raw(c.qos, c.constraint)?,
    })
}

fn sla_from_raw(
    qos: Option<RawQos>,
    constraint: Option<RawConstraint>,
) -> Result<Option<SlaSpec>, PackageError> {
    let qos = qos.unwrap_or_default();
    let mut sla = SlaSpec {
        persistent: constraint.and_then(|c| c.persistent),
        ..SlaSpec::default()
    };
    if let Some(t) = qos.throughput {
        if t <= 0 || t > u32::MAX as i64 {
            return Err(schema(format!(
                "throughput must be a positive integer, got {t}"
            )));
        }
        sla.throughput_rps = Some(t as u32);
    }
    if let Some(pct) = qos.availability {
        if !(pct > 0.0 && pct < 100.0) {
            return Err(schema(format!(
                "availability must be a percentage in (0, 100), got {pct}"
            )));
        }
        sla.availability = Some(pct / 100.0);
    }
    sla.locality = match qos.locality {
        None => None,
        Some(RawLocality::Mode(m)) => match m.to_ascii_uppercase().as_str() {
            "LOCAL" => Some(Locality::Local),
            "NONE" => Some(Locality::None),
            other => return Err(schema(format!("unknown locality `{other}`"))),
        },
        Some(RawLocality::Preferred(dcs)) if dcs.is_empty() => {
            return Err(schema("preferred datacenter list is empty"))
        }
        Some(RawLocality::Preferred(dcs)) => Some(Locality::Preferred(dcs)),
    };
    sla.consistency = match qos.consistency.as_deref().map(str::to_ascii_uppercase) {
        None => {
            if qos.staleness.is_some() {
                return Err(schema("`staleness` requires consistency BOUNDED_STALENESS"));
            }
            None
        }
        Some(c) => Some(match c.as_str() {
            "STRONG" => Consistency::Strong,
            "RYW" | "READ_YOUR_WRITE" | "READ_YOUR_WRITES" => Consistency::ReadYourWrites,
            "BOUNDED_STALENESS" => {
                let secs = qos
                    .staleness
                    .ok_or_else(|| schema("BOUNDED_STALENESS requires `staleness` seconds"))?;
                let delta_ms = (secs * 1000.0).round();
                if !(delta_ms >= 1.0) {
                    return Err(schema(format!("staleness must be positive, got {secs}")));
                }
                Consistency::BoundedStaleness {
                    delta_ms: delta_ms as u64,
                }
            }
            other => return Err(schema(format!("unknown consistency `{other}`"))),
        }),
    };
    if sla.consistency.is_some()
        && !matches!(sla.consistency, Some(Consistency::BoundedStaleness { .. }))
        && qos.staleness.is_some()
    {
        return Err(schema("`staleness` requires consistency BOUNDED_STALENESS"));
    }
    Ok(if sla.is_empty() { None } else { Some(sla) })
}

fn sla_to_raw(sla: &Option<SlaSpec>) -> (Option<RawQos>, Option<RawConstraint>) {
    let Some(sla) = sla else { return (None, None) };
    let (consistency, staleness) = match sla.consistency {
        None => (None, None),
        Some(Consistency::Strong) => (Some("STRONG".to_string()), None),
        Some(Consistency::ReadYourWrites) => (Some("RYW".to_string()), None),
        Some(Consistency::BoundedStaleness { delta_ms }) => (
            Some("BOUNDED_STALENESS".to_string()),
            Some(delta_ms as f64 / 1000.0),
        ),
    };
    let qos = RawQos {
        throughput: sla.throughput_rps.map(i64::from),
        availability: sla.availability.map(|a| a * 100.0),
        locality: sla.locality.as_ref().map(|l| match l {
            Locality::Local => RawLocality::Mode("LOCAL".into()),
            Locality::None => RawLocality::Mode("NONE".into()),
            Locality::Preferred(dcs) => RawLocality::Preferred(dcs.clone()),
        }),
        consistency,
        staleness,
    };
    let has_qos = qos.throughput.is_some()
        || qos.availability.is_some()
        || qos.locality.is_some()
        || qos.consistency.is_some();
    let constraint = sla.persistent.map(|p| RawConstraint {
        persistent: Some(p),
    });
    (has_qos.then_some(qos), constraint)
}

/// Writes a package back out in the file format accepted by [`parse_package`].
pub fn to_yaml(pkg: &PackageSpec) -> String {
    let raw = RawPackage {
        name: Some(pkg.name.clone()),
        classes: pkg
            .classes
            .iter()
            .map(|c| {
                let (qos, constraint) = sla_to_raw(&c.sla);
                RawClass {
                    name: c.name.clone(),
                    parent: c.parent.clone(),
                    description: None,
                    state_spec: Some(RawStateSpec {
                        key_specs: c
                            .state_keys
                            .iter()
                            .map(|k| RawKeySpec {
                                name: k.name.clone(),
                                access: Some(k.access),
                                kind: Some(k.kind),
                            })
                            .collect(),
                    }),
                    key_specs: None,
                    functions: c
                        .functions
                        .iter()
                        .map(|b| {
                            let (qos, constraint) = sla_to_raw(&b.sla);
                            RawBinding {
                                function: b.function.clone(),
                                access: Some(b.access),
                                output_cls: b.output_class.clone(),
                                qos,
                                constraint,
                                image: None,
                                description: None,
                            }
                        })
                        .collect(),
                    qos,
                    constraint,
                }
            })
            .collect(),
        functions: pkg
            .functions
            .iter()
            .map(|f| RawFunction {
                name: f.name.clone(),
                kind: match f.kind {
                    FunctionKind::Builtin => "BUILTIN",
                    FunctionKind::Task => "TASK",
                    FunctionKind::Macro => "MACRO",
                }
                .into(),
                image: None,
                description: None,
                handler: f.handler.clone(),
                dataflow: f.dataflow.as_ref().map(|d| RawDataflow {
                    args: d.args.clone(),
                    output: d.output.clone(),
                    steps: d
                        .steps
                        .iter()
                        .map(|s| RawStep {
                            name: s.name.clone(),
                            target: match &s.target {
                                StepTarget::Root => "$self".into(),
                                StepTarget::Var(v) => format!("${v}"),
                                StepTarget::Object(o) => o.clone(),
                            },
                            function: s.function.clone(),
                            inputs: s
                                .inputs
                                .iter()
                                .map(|i| match i {
                                    StepInput::Var(v) => serde_json::Value::String(format!("${v}")),
                                    StepInput::Literal(l) => l.clone(),
                                })
                                .collect(),
                            output_var: s.output_var.clone(),
                            immutable: s.immutable,
                        })
                        .collect(),
                }),
            })
            .collect(),
    };
    serde_yaml::to_string(&raw).expect("package serialization is infallible")
}
