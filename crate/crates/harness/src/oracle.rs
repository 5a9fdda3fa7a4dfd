//! Sequential reference model of provenance accumulation.

use std::collections::{BTreeMap, BTreeSet};

use flowtrace_core::ResourceId;
use flowtrace_middleware::engine::SettledFlow;

/// Brute-force provenance bookkeeping: one map, one flow at a time, no
/// locking, no protocol. Concurrent runs are checked by replaying their
/// settlement order through this model and demanding equality.
#[derive(Debug, Clone, Default)]
pub struct OracleState {
    prov: BTreeMap<ResourceId, BTreeSet<ResourceId>>,
}

impl OracleState {
    pub fn new() -> OracleState {
        OracleState::default()
    }

    /// Applies one successful flow: the destination absorbs the
    /// source's accumulated set plus the source itself. A resource
    /// never lists itself, no matter how the flows loop.
    pub fn apply(&mut self, source: &ResourceId, destination: &ResourceId) {
        let from_source = self.prov.get(source).cloned().unwrap_or_default();
        let dest = self.prov.entry(destination.clone()).or_default();
        dest.extend(from_source);
        dest.insert(source.clone());
        dest.remove(destination);
    }

    /// Replays settled flows in order. The input must already be the
    /// settlement sequence; this function adds no reordering.
    pub fn replay<'a>(flows: impl IntoIterator<Item = &'a SettledFlow>) -> OracleState {
        let mut state = OracleState::new();
        for flow in flows {
            state.apply(&flow.source, &flow.destination);
        }
        state
    }

    pub fn provenance(&self, id: &ResourceId) -> BTreeSet<ResourceId> {
        self.prov.get(id).cloned().unwrap_or_default()
    }
}
