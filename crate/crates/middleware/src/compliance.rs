//! Policy evaluation over reserved flows.
//!
//! A flow is checked after its reservations are held and before any grant is
//! returned, so violations are prevented rather than detected after the
//! fact. Policies are small pure functions chained in registration order;
//! evaluation is lazy and stops at the first denial. A panicking enforcer
//! counts as a denial under its own name: the chain fails closed.

use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, RwLock};

use flowtrace_core::Label;

/// Everything an enforcer may look at for one flow. The two locality
/// booleans are precomputed by the engine (which knows the local node and
/// its peer registry) so enforcers stay free of topology lookups.
#[derive(Debug, Clone)]
pub struct FlowContext {
    pub source_label: Label,
    pub destination_label: Label,
    /// Destination is a stream whose far end lives off this node.
    pub destination_is_external: bool,
    /// The source itself, or anything in its provenance, originated off
    /// this node.
    pub source_is_external_origin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Allow,
    Deny { policy: String },
}

impl Verdict {
    pub fn deny(policy: impl Into<String>) -> Self {
        Verdict::Deny {
            policy: policy.into(),
        }
    }

    pub fn is_allow(&self) -> bool {
        matches!(self, Verdict::Allow)
    }
}

/// One pluggable policy. Implementations must be pure functions of the
/// context; the chain may call them from any task.
pub trait Enforcer: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, ctx: &FlowContext) -> Verdict;
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("enforcer name already registered: {0}")]
    DuplicateName(String),
}

/// Ordered enforcer chain. Registration appends; evaluation walks the chain
/// in order and returns the first denial.
pub struct Chain {
    enforcers: RwLock<Vec<Arc<dyn Enforcer>>>,
}

impl Chain {
    pub fn empty() -> Self {
        Self {
            enforcers: RwLock::new(Vec::new()),
        }
    }

    /// The built-in chain: confidentiality first, then integrity.
    pub fn with_default_policies() -> Self {
        let chain = Self::empty();
        chain.register(Arc::new(LocalConfidentiality)).unwrap();
        chain.register(Arc::new(LocalIntegrity)).unwrap();
        chain
    }

    pub fn register(&self, enforcer: Arc<dyn Enforcer>) -> Result<(), ChainError> {
        let mut enforcers = self.enforcers.write().unwrap();
        if enforcers.iter().any(|e| e.name() == enforcer.name()) {
            return Err(ChainError::DuplicateName(enforcer.name().to_string()));
        }
        enforcers.push(enforcer);
        Ok(())
    }

    /// First-denial evaluation. Enforcers after a denial are not consulted,
    /// and an enforcer that panics denies under its own name.
    pub fn check(&self, ctx: &FlowContext) -> Verdict {
        let enforcers = self.enforcers.read().unwrap();
        for enforcer in enforcers.iter() {
            let verdict = panic::catch_unwind(AssertUnwindSafe(|| enforcer.evaluate(ctx)))
                .unwrap_or_else(|_| Verdict::deny(enforcer.name()));
            if let Verdict::Deny { .. } = verdict {
                return verdict;
            }
        }
        Verdict::Allow
    }

    pub fn names(&self) -> Vec<String> {
        self.enforcers
            .read()
            .unwrap()
            .iter()
            .map(|e| e.name().to_string())
            .collect()
    }
}

impl Default for Chain {
    fn default() -> Self {
        Self::with_default_policies()
    }
}

/// Keeps confidential data on the node: denies when the destination is
/// external and the source (or anything in its ancestry) carries the
/// confidentiality flag.
pub struct LocalConfidentiality;

impl Enforcer for LocalConfidentiality {
    fn name(&self) -> &str {
        "local_confidentiality"
    }

    fn evaluate(&self, ctx: &FlowContext) -> Verdict {
        let tainted = ctx.source_label.flags.confidentiality
            || ctx.source_label.provenance.any_confidential();
        if ctx.destination_is_external && tainted {
            Verdict::deny(self.name())
        } else {
            Verdict::Allow
        }
    }
}

/// Protects flagged resources from contamination: denies when the
/// destination carries the integrity flag and the source has external
/// origin anywhere in its provenance.
pub struct LocalIntegrity;

impl Enforcer for LocalIntegrity {
    fn name(&self) -> &str {
        "local_integrity"
    }

    fn evaluate(&self, ctx: &FlowContext) -> Verdict {
        if ctx.destination_label.flags.integrity && ctx.source_is_external_origin {
            Verdict::deny(self.name())
        } else {
            Verdict::Allow
        }
    }
}

/// Closure-backed enforcer for scripted policies in tests and demos.
pub struct FnEnforcer {
    name: String,
    func: Box<dyn Fn(&FlowContext) -> Verdict + Send + Sync>,
}

impl FnEnforcer {
    pub fn new(
        name: impl Into<String>,
        func: impl Fn(&FlowContext) -> Verdict + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            func: Box::new(func),
        }
    }
}

impl Enforcer for FnEnforcer {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, ctx: &FlowContext) -> Verdict {
        (self.func)(ctx)
    }
}
