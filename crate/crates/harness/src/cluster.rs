//! In-process multi-node clusters on loopback ports.

use std::future::Future;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::runtime::Runtime;

use flowtrace_core::{NodeId, ResourceId};
use flowtrace_middleware::engine::Engine;
use flowtrace_middleware::middleware::{Middleware, MiddlewareConfig};
use flowtrace_middleware::wirelog::WireLog;
use flowtrace_shim::{MiddlewareClient, ShimConfig};

use crate::HarnessError;

/// The two labels of one synthetic stream: `near` as the initiating
/// node sees it, `far` as the other endpoint's node sees it. Across
/// nodes they are mirrors of the same socket pair; on a single node
/// they are two independent local labels.
#[derive(Debug, Clone)]
pub struct StreamPair {
    pub near: ResourceId,
    pub far: ResourceId,
}

struct ClusterNode {
    name: NodeId,
    middleware: Middleware,
    host: Ipv4Addr,
    next_port: AtomicU16,
}

/// A set of running middleware instances, fully peered.
///
/// P2M and M2M traffic travels over real TCP on ephemeral loopback
/// ports. The traced data plane is synthetic: streams get deterministic
/// addresses from a per-node fake subnet (`10.0.<n>.1`), so scripts and
/// tests control socket identities exactly and never collide with the
/// control plane.
pub struct Cluster {
    runtime: Runtime,
    nodes: Vec<ClusterNode>,
}

impl Cluster {
    /// Boots one middleware per name. `reservation_timeout` applies to
    /// every node.
    pub fn start(names: &[&str], reservation_timeout: Duration) -> Result<Cluster, HarnessError> {
        if names.len() > 200 {
            return Err(HarnessError::infra("cluster larger than 200 nodes"));
        }
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| HarnessError::Infra(format!("tokio runtime: {e}")))?;
        let mut nodes = Vec::new();
        for (idx, name) in names.iter().enumerate() {
            let node: NodeId = name
                .parse()
                .map_err(|e| HarnessError::Infra(format!("node name {name:?}: {e}")))?;
            let mut config = MiddlewareConfig::new(node.clone());
            config.p2m_addr = "127.0.0.1:0".parse().unwrap();
            config.m2m_addr = "127.0.0.1:0".parse().unwrap();
            config.reservation_timeout = reservation_timeout;
            let middleware = runtime
                .block_on(Middleware::start(config))
                .map_err(|e| HarnessError::Infra(format!("starting node {name}: {e}")))?;
            nodes.push(ClusterNode {
                name: node,
                middleware,
                host: Ipv4Addr::new(10, 0, idx as u8 + 1, 1),
                next_port: AtomicU16::new(41000),
            });
        }
        Ok(Cluster { runtime, nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_id(&self, idx: usize) -> &NodeId {
        &self.nodes[idx].name
    }

    pub fn engine(&self, idx: usize) -> &Engine {
        self.nodes[idx].middleware.engine()
    }

    pub fn wirelog(&self, idx: usize) -> &Arc<WireLog> {
        self.nodes[idx].middleware.wirelog()
    }

    pub fn p2m_addr(&self, idx: usize) -> SocketAddr {
        self.nodes[idx].middleware.p2m_addr()
    }

    pub fn m2m_addr(&self, idx: usize) -> SocketAddr {
        self.nodes[idx].middleware.m2m_addr()
    }

    /// A fresh client (its own TCP connection) for one node's daemon.
    pub fn client(&self, idx: usize) -> MiddlewareClient {
        MiddlewareClient::new(ShimConfig::new(self.p2m_addr(idx)))
    }

    /// Runs a future on the cluster's runtime from synchronous code.
    pub fn block_on<F: Future>(&self, future: F) -> F::Output {
        self.runtime.block_on(future)
    }

    fn alloc_socket(&self, idx: usize) -> SocketAddr {
        let node = &self.nodes[idx];
        let port = node.next_port.fetch_add(1, Ordering::SeqCst);
        SocketAddr::from((node.host, port))
    }

    /// Opens a synthetic stream between two nodes (or within one) and
    /// enrolls both endpoint labels. For a cross-node pair each engine
    /// also learns which peer owns the far socket, so flows over the
    /// stream resolve and synchronize like real cross-node traffic.
    pub fn open_stream(&self, near: usize, far: usize) -> Result<StreamPair, HarnessError> {
        let near_sock = self.alloc_socket(near);
        let far_sock = self.alloc_socket(far);
        let near_id = ResourceId::stream(self.nodes[near].name.clone(), near_sock, far_sock);
        let far_id = ResourceId::stream(self.nodes[far].name.clone(), far_sock, near_sock);
        if near != far {
            self.block_on(async {
                self.engine(near)
                    .add_peer(far_sock, self.nodes[far].name.clone(), self.m2m_addr(far))
                    .await?;
                self.engine(far)
                    .add_peer(near_sock, self.nodes[near].name.clone(), self.m2m_addr(near))
                    .await
            })
            .map_err(|e| HarnessError::Infra(format!("peering stream: {e}")))?;
        }
        self.block_on(async {
            self.engine(near)
                .enroll(near_id.clone(), Default::default())
                .await?;
            self.engine(far).enroll(far_id.clone(), Default::default()).await
        })
        .map_err(|e| HarnessError::Infra(format!("enrolling stream: {e}")))?;
        Ok(StreamPair {
            near: near_id,
            far: far_id,
        })
    }

    /// A stream whose far end belongs to nobody in the cluster. The
    /// peer socket sits in a subnet no registry knows, so the node
    /// treats the destination as external.
    pub fn external_stream(&self, idx: usize) -> Result<ResourceId, HarnessError> {
        let near_sock = self.alloc_socket(idx);
        let far_port = self.nodes[idx].next_port.fetch_add(1, Ordering::SeqCst);
        let far_sock = SocketAddr::from((Ipv4Addr::new(203, 0, 113, 9), far_port));
        let id = ResourceId::stream(self.nodes[idx].name.clone(), near_sock, far_sock);
        self.block_on(self.engine(idx).enroll(id.clone(), Default::default()))
            .map_err(|e| HarnessError::Infra(format!("enrolling external stream: {e}")))?;
        Ok(id)
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            self.runtime.block_on(node.middleware.shutdown());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_get_deterministic_addresses() {
        let cluster = Cluster::start(&["left", "right"], Duration::from_secs(5)).unwrap();
        let pair = cluster.open_stream(0, 1).unwrap();
        assert_eq!(
            pair.near.stream_sockets().unwrap().0,
            "10.0.1.1:41000".parse().unwrap()
        );
        assert_eq!(
            pair.far.stream_sockets().unwrap().0,
            "10.0.2.1:41000".parse().unwrap()
        );
        let again = cluster.open_stream(0, 1).unwrap();
        assert_eq!(
            again.near.stream_sockets().unwrap().0,
            "10.0.1.1:41001".parse().unwrap()
        );
    }

    #[test]
    fn same_node_streams_use_two_ports() {
        let cluster = Cluster::start(&["solo"], Duration::from_secs(5)).unwrap();
        let pair = cluster.open_stream(0, 0).unwrap();
        let (near_local, near_peer) = pair.near.stream_sockets().unwrap();
        let (far_local, far_peer) = pair.far.stream_sockets().unwrap();
        assert_eq!(near_local, far_peer);
        assert_eq!(near_peer, far_local);
        assert_ne!(near_local, near_peer);
    }

    #[test]
    fn external_streams_point_off_cluster() {
        let cluster = Cluster::start(&["solo"], Duration::from_secs(5)).unwrap();
        let id = cluster.external_stream(0).unwrap();
        let (_, peer) = id.stream_sockets().unwrap();
        assert_eq!(peer.ip().to_string(), "203.0.113.9");
    }
}
