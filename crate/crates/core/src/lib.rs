//! Shared vocabulary of the flowtrace system: resource identity, compliance
//! flags, labels, flows, and the wire schemas of the P2M and M2M protocols.
//!
//! Everything here is an immutable value type, safe to copy between
//! concurrent contexts. Mutation of labels happens only inside the
//! middleware's traceability engine, under reservation.

pub mod flags;
pub mod flow;
pub mod id;
pub mod label;
pub mod node;
pub mod proto;

pub use flags::ComplianceFlags;
pub use flow::{Flow, FlowError, FlowOutcome, Grant, GrantId};
pub use id::{IdError, ResourceId, ResourceKind};
pub use label::{Label, LabelSummary, Provenance};
pub use node::NodeId;
