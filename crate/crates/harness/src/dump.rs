//! Provenance inspection against a live daemon.

use std::net::SocketAddr;

use flowtrace_core::proto::ProvenanceEntry;
use flowtrace_core::ResourceId;
use flowtrace_shim::{MiddlewareClient, ShimConfig};

use crate::HarnessError;

/// Renders provenance entries one canonical id per line, in global id
/// order (processes, then files, then streams). An empty set renders as
/// `(empty)`. The output is deterministic, so golden files can pin it.
pub fn render(entries: &[ProvenanceEntry]) -> String {
    if entries.is_empty() {
        return "(empty)".to_string();
    }
    let mut parsed: Vec<ResourceId> = Vec::new();
    let mut raw: Vec<&str> = Vec::new();
    for entry in entries {
        match ResourceId::parse(&entry.id) {
            Ok(id) => parsed.push(id),
            Err(_) => raw.push(&entry.id),
        }
    }
    parsed.sort();
    raw.sort();
    let mut lines: Vec<String> = parsed.into_iter().map(|id| id.canonical()).collect();
    lines.extend(raw.into_iter().map(String::from));
    lines.join("\n")
}

/// Queries one resource's provenance from the daemon at `p2m` and
/// renders it.
pub fn dump_provenance(p2m: SocketAddr, id: &str) -> Result<String, HarnessError> {
    let resource = ResourceId::parse(id)
        .map_err(|e| HarnessError::Infra(format!("resource id {id:?}: {e}")))?;
    let client = MiddlewareClient::new(ShimConfig::new(p2m));
    let entries = client
        .provenance(&resource)
        .map_err(|e| HarnessError::Infra(format!("querying {id}: {e}")))?;
    Ok(render(&entries))
}
