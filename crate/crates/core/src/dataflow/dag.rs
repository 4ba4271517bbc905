use std::collections::{BTreeMap, BTreeSet};

use super::{DataflowError, DataflowSpec, StepTarget};

/// A validated dataflow: dependency edges between steps and a topological
/// layering. Steps in one layer are independent of each other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    /// step → steps whose output it reads.
    pub deps: BTreeMap<String, BTreeSet<String>>,
    /// Layers in execution order; names sorted within a layer.
    pub layers: Vec<Vec<String>>,
}

impl Dag {
    pub fn layer_of(&self, step: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.iter().any(|s| s == step))
    }
}

pub fn build_dag(spec: &DataflowSpec) -> Result<Dag, DataflowError> {
    let mut producer: BTreeMap<&str, &str> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for s in &spec.steps {
        if !names.insert(s.name.as_str()) {
            return Err(DataflowError::DuplicateStep(s.name.clone()));
        }
        if let Some(v) = &s.output_var {
            if spec.args.iter().any(|a| a == v) || producer.insert(v, &s.name).is_some() {
                return Err(DataflowError::DuplicateVar(v.clone()));
            }
        }
    }
    let mut deps: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for s in &spec.steps {
        let mut d = BTreeSet::new();
        for var in s.reads() {
            if spec.args.iter().any(|a| a == var) {
                continue;
            }
            match producer.get(var) {
                Some(p) => {
                    d.insert(p.to_string());
                }
                None => {
                    return Err(DataflowError::UndefinedVar {
                        step: s.name.clone(),
                        var: var.to_string(),
                    })
                }
            }
        }
        if let StepTarget::Object(id) = &s.target {
            if id.is_empty() {
                return Err(DataflowError::UndefinedVar {
                    step: s.name.clone(),
                    var: String::new(),
                });
            }
        }
        deps.insert(s.name.clone(), d);
    }

    let mut done: BTreeSet<String> = BTreeSet::new();
    let mut layers = Vec::new();
    while done.len() < deps.len() {
        let layer: Vec<String> = deps
            .iter()
            .filter(|(n, d)| !done.contains(*n) && d.iter().all(|x| done.contains(x)))
            .map(|(n, _)| n.clone())
            .collect();
        if layer.is_empty() {
            let stuck = deps
                .keys()
                .find(|n| !done.contains(*n))
                .cloned()
                .unwrap_or_default();
            return Err(DataflowError::Cycle(stuck));
        }
        done.extend(layer.iter().cloned());
        layers.push(layer);
    }
    if let Some(out) = &spec.output {
        if !producer.contains_key(out.as_str()) && !spec.args.contains(out) {
            return Err(DataflowError::UndefinedVar {
                step: "<output>".into(),
                var: out.clone(),
            });
        }
    }
    Ok(Dag { deps, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataflow::{DataflowStep, StepInput};

    fn step(name: &str, inputs: &[&str], out: Option<&str>) -> DataflowStep {
        DataflowStep {
            name: name.into(),
            target: StepTarget::Root,
            function: "echo".into(),
            inputs: inputs
                .iter()
                .map(|v| StepInput::Var(v.to_string()))
                .collect(),
            output_var: out.map(String::from),
            immutable: true,
        }
    }

    fn spec(steps: Vec<DataflowStep>) -> DataflowSpec {
        DataflowSpec {
            args: vec!["x".into()],
            steps,
            output: None,
        }
    }

    #[test]
    fn chain_layers() {
        let d = build_dag(&spec(vec![
            step("a", &["x"], Some("ra")),
            step("b", &["ra"], Some("rb")),
            step("c", &["rb"], Some("rc")),
        ]))
        .unwrap();
        assert_eq!(d.layers, vec![vec!["a"], vec!["b"], vec!["c"]]);
    }

    #[test]
    fn diamond_shares_layer() {
        let d = build_dag(&spec(vec![
            step("d", &["rb", "rc"], Some("rd")),
            step("c", &["ra"], Some("rc")),
            step("b", &["ra"], Some("rb")),
            step("a", &["x"], Some("ra")),
        ]))
        .unwrap();
        assert_eq!(d.layers, vec![vec!["a"], vec!["b", "c"], vec!["d"]]);
        assert_eq!(d.layer_of("c"), Some(1));
    }

    #[test]
    fn self_loop_is_cycle() {
        let e = build_dag(&spec(vec![step("a", &["ra"], Some("ra"))])).unwrap_err();
        assert_eq!(e, DataflowError::Cycle("a".into()));
    }

    #[test]
    fn undefined_var() {
        let e = build_dag(&spec(vec![step("a", &["nope"], None)])).unwrap_err();
        assert!(matches!(e, DataflowError::UndefinedVar { .. }));
    }

    #[test]
    fn var_target_counts_as_read() {
        let mut b = step("b", &[], None);
        b.target = StepTarget::Var("ra".into());
        let d = build_dag(&spec(vec![step("a", &[], Some("ra")), b])).unwrap();
        assert_eq!(d.layers.len(), 2);
    }
}
