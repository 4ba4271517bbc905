use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::*;
use super::PackageError;
use crate::dataflow::DataflowSpec;

/// A function binding after inheritance and SLA resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedFunction {
    pub name: String,
    pub kind: FunctionKind,
    pub handler: Option<String>,
    pub dataflow: Option<DataflowSpec>,
    pub access: AccessModifier,
    pub output_class: Option<String>,
    /// Class whose binding is in effect (the nearest override).
    pub declared_in: String,
    /// Binding-level SLA as written on the winning binding.
    pub own_sla: SlaSpec,
    /// Binding SLA overlaid on the class's effective SLA.
    pub sla: SlaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedClass {
    pub package: String,
    pub name: String,
    pub parent: Option<String>,
    pub state_keys: Vec<StateKeySpec>,
    pub functions: Vec<ResolvedFunction>,
    /// Class-level SLA after walking the parent chain.
    pub sla: SlaSpec,
}

impl ResolvedClass {
    pub fn function(&self, name: &str) -> Option<&ResolvedFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn state_key(&self, name: &str) -> Option<&StateKeySpec> {
        self.state_keys.iter().find(|k| k.name == name)
    }

    pub fn unstructured_keys(&self) -> impl Iterator<Item = &str> {
        self.state_keys
            .iter()
            .filter(|k| k.kind == StateKind::Unstructured)
            .map(|k| k.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedClassSet {
    pub package: String,
    pub classes: BTreeMap<String, ResolvedClass>,
}

impl ResolvedClassSet {
    pub fn class(&self, name: &str) -> Option<&ResolvedClass> {
        self.classes.get(name)
    }

    /// Writes the resolved set back out as a package: full key lists, the
    /// class's own bindings and effective class SLAs. Resolving the result
    /// again yields the same set.
    pub fn to_package(&self) -> PackageSpec {
        let mut functions: Vec<FunctionSpec> = Vec::new();
        let classes = self
            .classes
            .values()
            .map(|c| {
                for f in &c.functions {
                    if f.kind != FunctionKind::Builtin
                        && !functions.iter().any(|g| g.name == f.name)
                    {
                        functions.push(FunctionSpec {
                            name: f.name.clone(),
                            kind: f.kind,
                            handler: f.handler.clone(),
                            dataflow: f.dataflow.clone(),
                        });
                    }
                }
                ClassSpec {
                    name: c.name.clone(),
                    parent: c.parent.clone(),
                    state_keys: c.state_keys.clone(),
                    functions: c
                        .functions
                        .iter()
                        .filter(|f| f.declared_in == c.name)
                        .map(|f| FunctionBinding {
                            function: f.name.clone(),
                            access: f.access,
                            output_class: f.output_class.clone(),
                            sla: (!f.own_sla.is_empty()).then(|| f.own_sla.clone()),
                        })
                        .collect(),
                    sla: (!c.sla.is_empty()).then(|| c.sla.clone()),
                }
            })
            .collect();
        PackageSpec {
            name: self.package.clone(),
            classes,
            functions,
        }
    }
}

struct Lookup<'a> {
    pkg: &'a PackageSpec,
    registry: &'a [PackageSpec],
}

impl<'a> Lookup<'a> {
    /// Finds a class by plain name (current package first) or `package.Class`.
    fn class(&self, reference: &str) -> Option<(&'a PackageSpec, &'a ClassSpec)> {
        if let Some(c) = self.pkg.class(reference) {
            return Some((self.pkg, c));
        }
        if let Some((pkg_name, class_name)) = reference.rsplit_once('.') {
            let pkg = std::iter::once(self.pkg)
                .chain(self.registry.iter())
                .find(|p| p.name == pkg_name)?;
            return pkg.class(class_name).map(|c| (pkg, c));
        }
        self.registry
            .iter()
            .find_map(|p| p.class(reference).map(|c| (p, c)))
    }
}

/// Resolves inheritance, overrides and per-field SLA inheritance for every
/// class in `pkg`. Parents may live in `pkg` or in any package of `registry`.
pub fn resolve_inheritance(
    pkg: &PackageSpec,
    registry: &[PackageSpec],
) -> Result<ResolvedClassSet, PackageError> {
    let lookup = Lookup { pkg, registry };
    let mut classes = BTreeMap::new();
    for class in &pkg.classes {
        let resolved = resolve_class(&lookup, pkg, class)?;
        classes.insert(class.name.clone(), resolved);
    }
    Ok(ResolvedClassSet {
        package: pkg.name.clone(),
        classes,
    })
}

fn resolve_class(
    lookup: &Lookup<'_>,
    pkg: &PackageSpec,
    class: &ClassSpec,
) -> Result<ResolvedClass, PackageError> {
    // Walk up to the root, detecting cycles.
    let mut chain: Vec<(&PackageSpec, &ClassSpec)> = vec![(pkg, class)];
    let mut cursor = class;
    while let Some(parent_ref) = &cursor.parent {
        let (parent_pkg, parent) =
            lookup
                .class(parent_ref)
                .ok_or_else(|| PackageError::MissingParent {
                    class: cursor.name.clone(),
                    parent: parent_ref.clone(),
                })?;
        if chain
            .iter()
            .any(|(p, c)| p.name == parent_pkg.name && c.name == parent.name)
        {
            return Err(PackageError::Cycle(class.name.clone()));
        }
        chain.push((parent_pkg, parent));
        cursor = parent;
    }

    let mut state_keys: Vec<StateKeySpec> = Vec::new();
    // (binding, declaring class, package the function is declared in)
    let mut bindings: Vec<(FunctionBinding, String, &PackageSpec)> = Vec::new();
    let mut class_sla = SlaSpec::default();

    for (decl_pkg, c) in chain.iter().rev() {
        for key in &c.state_keys {
            match state_keys.iter_mut().find(|k| k.name == key.name) {
                Some(existing) if existing.kind != key.kind => {
                    return Err(PackageError::Conflict {
                        class: class.name.clone(),
                        key: key.name.clone(),
                    })
                }
                Some(existing) => existing.access = key.access,
                None => state_keys.push(key.clone()),
            }
        }
        for b in &c.functions {
            match bindings
                .iter_mut()
                .find(|(e, _, _)| e.function == b.function)
            {
                Some(slot) => *slot = (b.clone(), c.name.clone(), decl_pkg),
                None => bindings.push((b.clone(), c.name.clone(), decl_pkg)),
            }
        }
        if let Some(sla) = &c.sla {
            class_sla = sla.overlay(&class_sla);
        }
    }

    let mut functions = Vec::with_capacity(bindings.len());
    for (b, declared_in, decl_pkg) in bindings {
        let (kind, handler, dataflow) = if is_builtin(&b.function) {
            match decl_pkg.function(&b.function) {
                Some(f) => (f.kind, f.handler.clone(), f.dataflow.clone()),
                None => (FunctionKind::Builtin, None, None),
            }
        } else {
            let f = decl_pkg
                .function(&b.function)
                .or_else(|| pkg.function(&b.function))
                .ok_or_else(|| PackageError::UnknownFunction {
                    class: declared_in.clone(),
                    function: b.function.clone(),
                })?;
            (f.kind, f.handler.clone(), f.dataflow.clone())
        };
        let own_sla = b.sla.clone().unwrap_or_default();
        let sla = own_sla.overlay(&class_sla);
        functions.push(ResolvedFunction {
            name: b.function,
            kind,
            handler,
            dataflow,
            access: b.access,
            output_class: b.output_class,
            declared_in,
            own_sla,
            sla,
        });
    }

    Ok(ResolvedClass {
        package: pkg.name.clone(),
        name: class.name.clone(),
        parent: class.parent.clone(),
        state_keys,
        functions,
        sla: class_sla,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::package::parse_package;

    pub const LISTING_IMAGE: &str = "\
classes:
  - name: Image
    qos:
        availability: 99.9
    constraint:
        persistent: true
    keySpecs:
      - name: image #File Image;
    functions:
      - name: resize
        qos:
            throughput: 100  #rps
        #container image
        image: img/resize
      - name: changeFormat
        image: img/change-format
      - name: detectObject
        qos:
            throughput: 100
        image: img/detect-object
  - name: LabelledImage
    parent: Image
    keySpecs:
      - name: labels #File labels;
    functions:
      - name: analyze
        qos:
            throughput: 50
";

    #[test]
    fn image_listing_parses() {
        let pkg = parse_package(LISTING_IMAGE).unwrap();
        let image = pkg.class("Image").unwrap();
        assert!((image.sla.as_ref().unwrap().availability.unwrap() - 0.999).abs() < 1e-12);
        assert_eq!(
            image.functions[0].sla.as_ref().unwrap().throughput_rps,
            Some(100)
        );
        let labelled = pkg.class("LabelledImage").unwrap();
        assert_eq!(labelled.parent.as_deref(), Some("Image"));
        assert_eq!(labelled.functions[0].function, "analyze");
        assert_eq!(
            labelled.functions[0].sla.as_ref().unwrap().throughput_rps,
            Some(50)
        );
    }

    #[test]
    fn labelled_image_inherits() {
        let pkg = parse_package(LISTING_IMAGE).unwrap();
        let set = resolve_inheritance(&pkg, &[]).unwrap();
        let li = set.class("LabelledImage").unwrap();
        let keys: Vec<_> = li.state_keys.iter().map(|k| k.name.as_str()).collect();
        assert_eq!(keys, ["image", "labels"]);
        let thr: Vec<_> = li
            .functions
            .iter()
            .map(|f| (f.name.as_str(), f.sla.throughput_rps))
            .collect();
        assert_eq!(
            thr,
            [
                ("resize", Some(100)),
                ("changeFormat", None),
                ("detectObject", Some(100)),
                ("analyze", Some(50)),
            ]
        );
        for f in &li.functions {
            assert!(
                (f.sla.availability.unwrap() - 0.999).abs() < 1e-12,
                "{}",
                f.name
            );
            assert_eq!(f.sla.persistent, Some(true));
        }
        assert!((li.sla.availability.unwrap() - 0.999).abs() < 1e-12);
    }

    #[test]
    fn no_parent_is_identity() {
        let pkg = parse_package(LISTING_IMAGE).unwrap();
        let set = resolve_inheritance(&pkg, &[]).unwrap();
        let image = set.class("Image").unwrap();
        let src = pkg.class("Image").unwrap();
        assert_eq!(image.state_keys, src.state_keys);
        let names: Vec<_> = image.functions.iter().map(|f| f.name.clone()).collect();
        let src_names: Vec<_> = src.functions.iter().map(|b| b.function.clone()).collect();
        assert_eq!(names, src_names);
        assert_eq!(Some(&image.sla), src.sla.as_ref());
    }

    #[test]
    fn child_class_sla_beats_parent_for_unannotated_method() {
        let text = "\
name: p
classes:
  - name: Base
    qos: { availability: 99 }
    functions:
      - function: f
  - name: Child
    parent: Base
    qos: { availability: 99.9 }
    functions:
      - function: g
";
        let set = resolve_inheritance(&parse_package(text).unwrap(), &[]).unwrap();
        let child = set.class("Child").unwrap();
        for f in ["f", "g"] {
            let a = child.function(f).unwrap().sla.availability.unwrap();
            assert!((a - 0.999).abs() < 1e-12, "{f}: {a}");
        }
        let base = set.class("Base").unwrap();
        assert!((base.function("f").unwrap().sla.availability.unwrap() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn override_replaces_binding() {
        let text = "\
name: p
classes:
  - name: Base
    functions:
      - { function: f, access: PUBLIC, qos: { throughput: 10 } }
  - name: Child
    parent: Base
    functions:
      - { function: f, access: PRIVATE, qos: { availability: 99 } }
";
        let set = resolve_inheritance(&parse_package(text).unwrap(), &[]).unwrap();
        let f = set.class("Child").unwrap().function("f").unwrap();
        assert_eq!(f.access, AccessModifier::Private);
        assert_eq!(f.declared_in, "Child");
        assert_eq!(f.sla.throughput_rps, None);
        assert!((f.sla.availability.unwrap() - 0.99).abs() < 1e-12);
    }

    #[test]
    fn cycles_missing_parents_and_conflicts() {
        let cycle = "name: p\nclasses:\n  - {name: A, parent: B}\n  - {name: B, parent: A}\n";
        assert!(matches!(
            resolve_inheritance(&parse_package(cycle).unwrap(), &[]),
            Err(PackageError::Cycle(_))
        ));
        let missing = "name: p\nclasses:\n  - {name: A, parent: Nope}\n";
        assert!(matches!(
            resolve_inheritance(&parse_package(missing).unwrap(), &[]),
            Err(PackageError::MissingParent { .. })
        ));
        let conflict = "\
name: p
classes:
  - name: A
    keySpecs: [{name: k, kind: structured}]
  - name: B
    parent: A
    keySpecs: [{name: k, kind: unstructured}]
";
        assert!(matches!(
            resolve_inheritance(&parse_package(conflict).unwrap(), &[]),
            Err(PackageError::Conflict { .. })
        ));
    }

    #[test]
    fn parent_from_registry() {
        let base = parse_package(
            "name: media\nclasses:\n  - name: Blob\n    keySpecs: [{name: data}]\n    functions: [{function: new}]\n",
        )
        .unwrap();
        let child =
            parse_package("name: app\nclasses:\n  - {name: Photo, parent: media.Blob}\n").unwrap();
        let set = resolve_inheritance(&child, &[base]).unwrap();
        let photo = set.class("Photo").unwrap();
        assert_eq!(photo.state_keys[0].name, "data");
        assert_eq!(photo.function("new").unwrap().kind, FunctionKind::Builtin);
    }
}
