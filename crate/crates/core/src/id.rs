//! Globally unique, URI-like resource identifiers.
//!
//! Canonical grammar (`scheme://node/detail`):
//!
//! ```text
//! process://<node>/<pid>@<start_time>
//! file://<node><absolute path>
//! stream://<node>/<local ip:port>-<peer ip:port>
//! ```
//!
//! The canonical string is the on-wire representation of an id in every
//! protocol message and in all CLI and log output. Formatting is injective:
//! two ids are equal iff their canonical strings are equal.

use std::cmp::Ordering;
use std::fmt;
use std::net::SocketAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("malformed scheme: {0}")]
    Scheme(String),
    #[error("malformed node: {0}")]
    Node(String),
    #[error("malformed detail: {0}")]
    Detail(String),
}

/// The three mediated resource kinds, in global reservation order.
///
/// `Process < File < Stream` is the fixed acquisition order that rules out
/// circular waits between concurrent reservations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceKind {
    Process,
    File,
    Stream,
}

impl ResourceKind {
    pub fn scheme(self) -> &'static str {
        match self {
            ResourceKind::Process => "process",
            ResourceKind::File => "file",
            ResourceKind::Stream => "stream",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Detail {
    /// `pid` plus `start_time` so a recycled pid yields a distinct id.
    Process { pid: u32, start_time: u64 },
    /// Absolute, normalized path (no `.`/`..`/empty segments).
    File { path: String },
    /// Local and peer sockets of one TCP stream endpoint.
    Stream { local: SocketAddr, peer: SocketAddr },
}

/// Globally unique identifier of a process, file, or TCP stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ResourceId {
    node: NodeId,
    detail: Detail,
}

impl ResourceId {
    pub fn process(node: NodeId, pid: u32, start_time: u64) -> Self {
        Self {
            node,
            detail: Detail::Process { pid, start_time },
        }
    }

    /// Builds a file id. The path must be absolute and normalized.
    pub fn file(node: NodeId, path: impl Into<String>) -> Result<Self, IdError> {
        let path = path.into();
        validate_path(&path)?;
        Self::check_detail_chars(&path)?;
        Ok(Self {
            node,
            detail: Detail::File { path },
        })
    }

    pub fn stream(node: NodeId, local: SocketAddr, peer: SocketAddr) -> Self {
        Self {
            node,
            detail: Detail::Stream { local, peer },
        }
    }

    fn check_detail_chars(detail: &str) -> Result<(), IdError> {
        if let Some(bad) = detail.chars().find(|c| c.is_whitespace() || c.is_control()) {
            return Err(IdError::Detail(format!(
                "detail contains forbidden character {bad:?}"
            )));
        }
        Ok(())
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn kind(&self) -> ResourceKind {
        match self.detail {
            Detail::Process { .. } => ResourceKind::Process,
            Detail::File { .. } => ResourceKind::File,
            Detail::Stream { .. } => ResourceKind::Stream,
        }
    }

    pub fn is_process(&self) -> bool {
        self.kind() == ResourceKind::Process
    }

    pub fn is_file(&self) -> bool {
        self.kind() == ResourceKind::File
    }

    pub fn is_stream(&self) -> bool {
        self.kind() == ResourceKind::Stream
    }

    /// For stream ids, the (local, peer) socket pair.
    pub fn stream_sockets(&self) -> Option<(SocketAddr, SocketAddr)> {
        match self.detail {
            Detail::Stream { local, peer } => Some((local, peer)),
            _ => None,
        }
    }

    /// For file ids, the absolute path.
    pub fn file_path(&self) -> Option<&str> {
        match &self.detail {
            Detail::File { path } => Some(path),
            _ => None,
        }
    }

    /// The mirrored view of a stream id as seen from the other endpoint's
    /// node: local and peer sockets swap, the node becomes `peer_node`.
    ///
    /// Mirroring twice returns the original id.
    pub fn mirrored_stream(&self, peer_node: NodeId) -> Option<ResourceId> {
        let (local, peer) = self.stream_sockets()?;
        Some(ResourceId::stream(peer_node, peer, local))
    }

    /// Canonical string form; equal to the `Display` rendering.
    pub fn canonical(&self) -> String {
        self.to_string()
    }

    /// Parses a canonical id string.
    pub fn parse(text: &str) -> Result<Self, IdError> {
        let (scheme, rest) = text
            .split_once("://")
            .ok_or_else(|| IdError::Scheme(format!("{text:?} has no '://' separator")))?;
        let slash = rest
            .find('/')
            .ok_or_else(|| IdError::Detail(format!("{text:?} has no detail after the node")))?;
        let node = NodeId::new(&rest[..slash])?;
        match scheme {
            "process" => {
                let detail = &rest[slash + 1..];
                let (pid, start) = detail.split_once('@').ok_or_else(|| {
                    IdError::Detail(format!("process detail {detail:?} has no '@' separator"))
                })?;
                let pid: u32 = pid.parse().map_err(|_| {
                    IdError::Detail(format!("process pid {pid:?} is not a non-negative integer"))
                })?;
                let start: u64 = start.parse().map_err(|_| {
                    IdError::Detail(format!(
                        "process start time {start:?} is not a non-negative integer"
                    ))
                })?;
                Ok(ResourceId::process(node, pid, start))
            }
            "file" => {
                // The path component starts at the separating slash.
                ResourceId::file(node, &rest[slash..])
            }
            "stream" => {
                let detail = &rest[slash + 1..];
                let (local, peer) = detail.split_once('-').ok_or_else(|| {
                    IdError::Detail(format!("stream detail {detail:?} has no '-' separator"))
                })?;
                let local: SocketAddr = local.parse().map_err(|_| {
                    IdError::Detail(format!("stream local socket {local:?} is not ip:port"))
                })?;
                let peer: SocketAddr = peer.parse().map_err(|_| {
                    IdError::Detail(format!("stream peer socket {peer:?} is not ip:port"))
                })?;
                Ok(ResourceId::stream(node, local, peer))
            }
            other => Err(IdError::Scheme(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Rejects relative and non-normalized paths.
fn validate_path(path: &str) -> Result<(), IdError> {
    if !path.starts_with('/') {
        return Err(IdError::Detail(format!("path {path:?} is not absolute")));
    }
    if path != "/" && path.ends_with('/') {
        return Err(IdError::Detail(format!("path {path:?} has a trailing '/'")));
    }
    for segment in path[1..].split('/') {
        match segment {
            "" if path == "/" => {}
            "" => return Err(IdError::Detail(format!("path {path:?} has an empty segment"))),
            "." | ".." => {
                return Err(IdError::Detail(format!(
                    "path {path:?} is not normalized (contains {segment:?})"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.detail {
            Detail::Process { pid, start_time } => {
                write!(f, "process://{}/{pid}@{start_time}", self.node)
            }
            Detail::File { path } => write!(f, "file://{}{path}", self.node),
            Detail::Stream { local, peer } => {
                write!(f, "stream://{}/{local}-{peer}", self.node)
            }
        }
    }
}

impl std::str::FromStr for ResourceId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for ResourceId {
    type Error = IdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<ResourceId> for String {
    fn from(id: ResourceId) -> String {
        id.canonical()
    }
}

/// Global total order: `Process < File < Stream`, then lexicographic on
/// the canonical string. Reservations are always acquired in this order.
impl Ord for ResourceId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.kind()
            .cmp(&other.kind())
            .then_with(|| self.canonical().cmp(&other.canonical()))
    }
}

impl PartialOrd for ResourceId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn formats_process_file_stream() {
        let p = ResourceId::process(node("nodeA"), 1234, 16788);
        assert_eq!(p.to_string(), "process://nodeA/1234@16788");

        let f = ResourceId::file(node("nodeA"), "/srv/www/secret.html").unwrap();
        assert_eq!(f.to_string(), "file://nodeA/srv/www/secret.html");

        let s = ResourceId::stream(
            node("nodeA"),
            "10.0.0.1:443".parse().unwrap(),
            "10.0.0.2:51000".parse().unwrap(),
        );
        assert_eq!(s.to_string(), "stream://nodeA/10.0.0.1:443-10.0.0.2:51000");
    }

    #[test]
    fn parses_canonical_forms() {
        let p = ResourceId::parse("process://nodeA/1234@16788").unwrap();
        assert_eq!(p, ResourceId::process(node("nodeA"), 1234, 16788));

        let s = ResourceId::parse("stream://nodeA/10.0.0.1:443-10.0.0.2:51000").unwrap();
        assert_eq!(
            s,
            ResourceId::stream(
                node("nodeA"),
                "10.0.0.1:443".parse().unwrap(),
                "10.0.0.2:51000".parse().unwrap(),
            )
        );
    }

    #[test]
    fn rejects_relative_and_unnormalized_paths() {
        assert!(ResourceId::file(node("nodeA"), "relative/path").is_err());
        assert!(ResourceId::file(node("nodeA"), "/a/../b").is_err());
        assert!(ResourceId::file(node("nodeA"), "/a//b").is_err());
        assert!(ResourceId::file(node("nodeA"), "/a/./b").is_err());
        assert!(ResourceId::file(node("nodeA"), "/a/b/").is_err());
        assert!(ResourceId::file(node("nodeA"), "").is_err());
    }

    #[test]
    fn parse_errors_name_the_offending_component() {
        match ResourceId::parse("bogus://nodeA/x") {
            Err(IdError::Scheme(_)) => {}
            other => panic!("expected scheme error, got {other:?}"),
        }
        match ResourceId::parse("file://node A/x") {
            Err(IdError::Node(_)) => {}
            other => panic!("expected node error, got {other:?}"),
        }
        match ResourceId::parse("process://nodeA/12x@5") {
            Err(IdError::Detail(_)) => {}
            other => panic!("expected detail error, got {other:?}"),
        }
        assert!(ResourceId::parse("file://nodeA").is_err());
        assert!(ResourceId::parse("file:relative").is_err());
        assert!(ResourceId::parse("stream://nodeA/nope").is_err());
    }

    #[test]
    fn recycled_pid_distinct_by_start_time() {
        let a = ResourceId::process(node("n"), 42, 100);
        let b = ResourceId::process(node("n"), 42, 200);
        assert_ne!(a, b);
        assert_ne!(a.to_string(), b.to_string());
    }

    #[test]
    fn kind_order_process_file_stream() {
        let p = ResourceId::process(node("z"), 1, 1);
        let f = ResourceId::file(node("a"), "/a").unwrap();
        let s = ResourceId::stream(
            node("a"),
            "127.0.0.1:1".parse().unwrap(),
            "127.0.0.1:2".parse().unwrap(),
        );
        assert!(p < f);
        assert!(f < s);
        assert!(p < s);
    }

    #[test]
    fn mirrored_stream_round_trips() {
        let s = ResourceId::stream(
            node("a"),
            "10.0.0.1:443".parse().unwrap(),
            "10.0.0.2:51000".parse().unwrap(),
        );
        let mirrored = s.mirrored_stream(node("b")).unwrap();
        assert_eq!(
            mirrored.to_string(),
            "stream://b/10.0.0.2:51000-10.0.0.1:443"
        );
        assert_eq!(mirrored.mirrored_stream(node("a")).unwrap(), s);
    }
}
