use super::model::AccessModifier;

/// Who is making a call or reading state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallerContext {
    /// A client outside every package.
    External,
    /// Code in a package but not bound to a class (e.g. a macro orchestrator).
    Package(String),
    /// A function of `class` in `package`.
    Class { package: String, class: String },
}

impl CallerContext {
    fn package(&self) -> Option<&str> {
        match self {
            CallerContext::External => None,
            CallerContext::Package(p) => Some(p),
            CallerContext::Class { package, .. } => Some(package),
        }
    }
}

/// A state key or function binding of a class in some package.
#[derive(Debug, Clone, Copy)]
pub struct AccessTarget<'a> {
    pub package: &'a str,
    pub class: &'a str,
    pub access: AccessModifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Deny,
}

impl AccessDecision {
    pub fn is_allowed(self) -> bool {
        self == AccessDecision::Allow
    }
}

pub fn check_access(caller: &CallerContext, target: AccessTarget<'_>) -> AccessDecision {
    let allowed = match target.access {
        AccessModifier::Public => true,
        AccessModifier::Package => caller.package() == Some(target.package),
        AccessModifier::Private => matches!(
            caller,
            CallerContext::Class { package, class }
                if package == target.package && class == target.class
        ),
    };
    if allowed {
        AccessDecision::Allow
    } else {
        AccessDecision::Deny
    }
}
