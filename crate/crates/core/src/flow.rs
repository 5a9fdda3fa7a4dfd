//! Directed data transfers and the grants that authorize them.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::ResourceId;
use crate::node::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("flow source and destination are the same resource: {0}")]
    SelfFlow(ResourceId),
    #[error("flow must have exactly one process endpoint: {from} -> {to}")]
    NotProcessMediated { from: ResourceId, to: ResourceId },
}

/// One directed data transfer between a process and a file or stream.
///
/// Flows are process-mediated I/O: exactly one endpoint is a process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    source: ResourceId,
    destination: ResourceId,
}

impl Flow {
    #[allow(clippy::result_large_err)]
    pub fn new(source: ResourceId, destination: ResourceId) -> Result<Self, FlowError> {
        if source == destination {
            return Err(FlowError::SelfFlow(source));
        }
        if source.is_process() == destination.is_process() {
            return Err(FlowError::NotProcessMediated {
                from: source,
                to: destination,
            });
        }
        Ok(Self {
            source,
            destination,
        })
    }

    pub fn source(&self) -> &ResourceId {
        &self.source
    }

    pub fn destination(&self) -> &ResourceId {
        &self.destination
    }
}

impl fmt::Display for Flow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.source, self.destination)
    }
}

/// Grant identifier: issuing middleware plus a monotone counter, unique per
/// middleware instance and never reused.
///
/// Canonical form `<node>/<counter>`; the node name cannot contain `/`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GrantId {
    node: NodeId,
    counter: u64,
}

impl GrantId {
    pub fn new(node: NodeId, counter: u64) -> Self {
        Self { node, counter }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let (node, counter) = text
            .split_once('/')
            .ok_or_else(|| format!("grant id {text:?} has no '/' separator"))?;
        let node = NodeId::new(node).map_err(|e| e.to_string())?;
        let counter = counter
            .parse()
            .map_err(|_| format!("grant counter {counter:?} is not an integer"))?;
        Ok(Self { node, counter })
    }
}

impl fmt::Display for GrantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.node, self.counter)
    }
}

impl TryFrom<String> for GrantId {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<GrantId> for String {
    fn from(id: GrantId) -> String {
        id.to_string()
    }
}

/// Authorization token binding one approved flow to its reserved resources
/// until the outcome is reported or the reservation deadline fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub grant_id: GrantId,
    pub flow: Flow,
    pub issued_at: std::time::Instant,
}

/// Execution result carried by an IoReport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowOutcome {
    Success,
    Failure,
}
