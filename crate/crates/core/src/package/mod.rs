//! Class, function and SLA definitions: parsing, inheritance and access control.

mod access;
mod model;
mod parse;
mod resolve;

pub use access::{check_access, AccessDecision, AccessTarget, CallerContext};
pub use model::*;
pub use parse::{parse_package, to_yaml};
pub use resolve::{resolve_inheritance, ResolvedClass, ResolvedClassSet, ResolvedFunction};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PackageError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("inheritance cycle through class `{0}`")]
    Cycle(String),
    #[error("class `{class}` extends unknown class `{parent}`")]
    MissingParent { class: String, parent: String },
    #[error("class `{class}` declares key `{key}` with a different kind than its parent")]
    Conflict { class: String, key: String },
    #[error("class `{class}` binds undeclared function `{function}`")]
    UnknownFunction { class: String, function: String },
}
