//! Per-resource traceability records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::flags::ComplianceFlags;
use crate::id::ResourceId;

/// Value copy of one ancestor's identity and flags, as they were when the
/// influencing flow settled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub id: ResourceId,
    pub flags: ComplianceFlags,
}

/// Deduplicated collection of ancestor summaries, keyed by id.
///
/// Inserting a summary whose id is already present merges the flags by OR,
/// so the collection stays bounded by the number of distinct resources.
/// Iteration follows the global id order, which makes every rendering of a
/// provenance set deterministic.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance(BTreeMap<ResourceId, ComplianceFlags>);

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, summary: LabelSummary) {
        self.0
            .entry(summary.id)
            .and_modify(|flags| *flags = flags.merge(summary.flags))
            .or_insert(summary.flags);
    }

    pub fn contains(&self, id: &ResourceId) -> bool {
        self.0.contains_key(id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = LabelSummary> + '_ {
        self.0.iter().map(|(id, flags)| LabelSummary {
            id: id.clone(),
            flags: *flags,
        })
    }

    /// True iff any summary has the confidentiality flag set.
    pub fn any_confidential(&self) -> bool {
        self.0.values().any(|flags| flags.confidentiality)
    }

    /// Ids of all summaries, in global order.
    pub fn ids(&self) -> impl Iterator<Item = &ResourceId> {
        self.0.keys()
    }
}

impl FromIterator<LabelSummary> for Provenance {
    fn from_iter<T: IntoIterator<Item = LabelSummary>>(iter: T) -> Self {
        let mut prov = Provenance::new();
        for summary in iter {
            prov.insert(summary);
        }
        prov
    }
}

/// The traceability record of one resource: its identity, its compliance
/// flags, and the provenance accumulated over its lifetime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub id: ResourceId,
    pub flags: ComplianceFlags,
    pub provenance: Provenance,
}

impl Label {
    pub fn new(id: ResourceId, flags: ComplianceFlags) -> Self {
        Self {
            id,
            flags,
            provenance: Provenance::new(),
        }
    }

    /// The summary other resources record when data flows out of this one.
    pub fn summary(&self) -> LabelSummary {
        LabelSummary {
            id: self.id.clone(),
            flags: self.flags,
        }
    }

    /// Applies the flow update rule with this label as destination:
    /// provenance gains the source's provenance plus the source's own
    /// summary. The label's own id is never admitted, and existing entries
    /// only gain flags, so provenance grows monotonically.
    pub fn absorb(&mut self, source: &Label) {
        self.merge_summaries(source.provenance.iter().chain(std::iter::once(source.summary())));
    }

    /// Unions externally supplied summaries into the provenance, skipping
    /// the label's own id.
    pub fn merge_summaries(&mut self, summaries: impl IntoIterator<Item = LabelSummary>) {
        for summary in summaries {
            if summary.id == self.id {
                continue;
            }
            self.provenance.insert(summary);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::NodeId;

    fn file(name: &str) -> ResourceId {
        ResourceId::file(NodeId::new("n").unwrap(), format!("/{name}")).unwrap()
    }

    fn process(pid: u32) -> ResourceId {
        ResourceId::process(NodeId::new("n").unwrap(), pid, 1)
    }

    #[test]
    fn duplicate_insert_merges_flags() {
        let mut prov = Provenance::new();
        prov.insert(LabelSummary {
            id: file("a"),
            flags: ComplianceFlags::confidential(),
        });
        prov.insert(LabelSummary {
            id: file("a"),
            flags: ComplianceFlags::integral(),
        });
        assert_eq!(prov.len(), 1);
        let merged = prov.iter().next().unwrap();
        assert!(merged.flags.confidentiality && merged.flags.integrity);
    }

    #[test]
    fn absorb_adds_source_provenance_and_source_id() {
        // P1 reads A, then writes B: provenance(B) = {P1, A}.
        let a = Label::new(file("A"), ComplianceFlags::NONE);
        let mut p1 = Label::new(process(1), ComplianceFlags::NONE);
        p1.absorb(&a);
        let mut b = Label::new(file("B"), ComplianceFlags::NONE);
        b.absorb(&p1);

        let ids: Vec<_> = b.provenance.ids().cloned().collect();
        assert_eq!(ids, vec![process(1), file("A")]);
    }

    #[test]
    fn absorb_never_admits_own_id() {
        let mut p1 = Label::new(process(1), ComplianceFlags::NONE);
        let mut b = Label::new(file("B"), ComplianceFlags::NONE);
        b.absorb(&p1);
        // B's provenance now contains P1; a flow back into P1 must not
        // record P1 itself.
        p1.absorb(&b);
        assert!(!p1.provenance.contains(&process(1)));
        assert!(p1.provenance.contains(&file("B")));
    }

    #[test]
    fn iteration_is_sorted_by_global_order() {
        let mut prov = Provenance::new();
        prov.insert(LabelSummary {
            id: file("z"),
            flags: ComplianceFlags::NONE,
        });
        prov.insert(LabelSummary {
            id: process(9),
            flags: ComplianceFlags::NONE,
        });
        let ids: Vec<_> = prov.ids().cloned().collect();
        assert_eq!(ids, vec![process(9), file("z")]);
    }
}
