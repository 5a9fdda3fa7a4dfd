//! The traceability engine: one logical owner of the node's id-to-label map.
//!
//! All state lives in a single owner task; callers talk to it through a
//! command channel. Operations that may block on a label reservation are
//! spawned as their own tasks holding clones of the per-label lock, so the
//! owner itself never waits. Every exclusive hold is force-released at its
//! deadline, which bounds every wait in the system: even operations that
//! acquire without an explicit timeout (flag merges, provenance snapshots)
//! wait at most as long as the current holders' remaining lifetimes.

mod owner;
mod slots;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::{mpsc, oneshot};

use flowtrace_core::{
    ComplianceFlags, Flow, Grant, GrantId, FlowOutcome, LabelSummary, NodeId, ResourceId,
};

use crate::compliance::{Chain, ChainError, Enforcer};
use crate::wirelog::WireLog;

use owner::Command;

pub const DEFAULT_RESERVATION_TIMEOUT: Duration = Duration::from_secs(5);

/// A statically configured peer: packets to `peer_socket` reach a process
/// on `node`, whose middleware listens at `m2m_endpoint`.
#[derive(Debug, Clone)]
pub struct PeerSpec {
    pub peer_socket: SocketAddr,
    pub node: NodeId,
    pub m2m_endpoint: SocketAddr,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub node: NodeId,
    pub reservation_timeout: Duration,
    pub peers: Vec<PeerSpec>,
    /// This node's own M2M address, advertised in outbound Reserve messages
    /// so the peer can route back. None when no M2M listener runs.
    pub m2m_endpoint: Option<SocketAddr>,
}

impl EngineConfig {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            reservation_timeout: DEFAULT_RESERVATION_TIMEOUT,
            peers: Vec::new(),
            m2m_endpoint: None,
        }
    }
}

/// Resolution of one authorization request.
#[derive(Debug, Clone)]
pub enum FlowDecision {
    Granted(Grant),
    Denied { policy: String },
    TimedOut,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("unknown resource: {0}")]
    UnknownResource(ResourceId),
    #[error("stale or unknown grant: {0}")]
    StaleGrant(GrantId),
    #[error("no live remote reservation for {0}")]
    StaleSync(ResourceId),
    #[error("peer middleware unreachable: {0}")]
    PeerUnreachable(String),
    #[error("reservation timed out")]
    Timeout,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("engine stopped")]
    Closed,
}

/// One successfully reported flow, in settlement order. The settlement
/// sequence is the engine's linearization point: replaying these flows
/// through a sequential oracle must reproduce every label's provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SettledFlow {
    pub seq: u64,
    pub source: ResourceId,
    pub destination: ResourceId,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EngineStats {
    pub labels: usize,
    pub active_grants: usize,
    pub remote_holds: usize,
    pub grants_issued: u64,
    pub grants_denied: u64,
    pub grants_timed_out: u64,
    pub grants_expired: u64,
    pub flows_settled: u64,
    pub remote_expired: u64,
    /// Readers-writers invariant violations observed by the instrumented
    /// reservation counters. Any value other than zero is a bug.
    pub violations: u64,
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub issued: AtomicU64,
    pub denied: AtomicU64,
    pub timed_out: AtomicU64,
    pub expired: AtomicU64,
    pub settled: AtomicU64,
    pub remote_expired: AtomicU64,
    pub violations: AtomicU64,
}

/// Cloneable handle to one node's engine.
#[derive(Clone)]
pub struct Engine {
    tx: mpsc::Sender<Command>,
    node: NodeId,
    chain: Arc<Chain>,
    wirelog: Arc<WireLog>,
    counters: Arc<Counters>,
}

impl Engine {
    /// Spawns the owner task on the current runtime and returns a handle.
    pub fn start(config: EngineConfig) -> Engine {
        let (tx, rx) = mpsc::channel(256);
        let chain = Arc::new(Chain::with_default_policies());
        let wirelog = Arc::new(WireLog::new());
        let counters = Arc::new(Counters::default());
        let node = config.node.clone();
        let owner = owner::Owner::new(
            config,
            tx.clone(),
            chain.clone(),
            wirelog.clone(),
            counters.clone(),
        );
        tokio::spawn(owner.run(rx));
        Engine {
            tx,
            node,
            chain,
            wirelog,
            counters,
        }
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn wirelog(&self) -> &Arc<WireLog> {
        &self.wirelog
    }

    pub fn register_enforcer(&self, enforcer: Arc<dyn Enforcer>) -> Result<(), ChainError> {
        self.chain.register(enforcer)
    }

    async fn dispatch<T>(
        &self,
        make: impl FnOnce(oneshot::Sender<T>) -> Command,
    ) -> Result<T, EngineError> {
        let (reply_tx, reply_rx) = oneshot::channel();
        self.tx
            .send(make(reply_tx))
            .await
            .map_err(|_| EngineError::Closed)?;
        reply_rx.await.map_err(|_| EngineError::Closed)
    }

    /// Registers a resource. Idempotent: an existing label keeps its
    /// provenance and gains the declared flags by OR-merge.
    pub async fn enroll(&self, id: ResourceId, flags: ComplianceFlags) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::Enroll { id, flags, reply }).await
    }

    /// Authorization: reserves both endpoints (source shared, destination
    /// exclusive, acquired in global id order), runs the policy chain, and
    /// coordinates with the peer middleware when the destination stream
    /// lives across nodes. Unknown endpoints are auto-enrolled with empty
    /// flags.
    pub async fn request_flow(&self, flow: Flow) -> Result<FlowDecision, EngineError> {
        self.dispatch(|reply| Command::RequestFlow { flow, reply }).await?
    }

    /// Reporting: applies the provenance update rule on success, releases
    /// the grant's reservations, and pushes the update to the peer
    /// middleware when one is involved. The returned ack always trails the
    /// local label write (and the peer's ack, when any).
    pub async fn report_flow(
        &self,
        grant_id: GrantId,
        outcome: FlowOutcome,
    ) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::ReportFlow {
            grant_id,
            outcome,
            reply,
        })
        .await?
    }

    /// Snapshot of a label's provenance under a momentary shared hold,
    /// sorted by the global id order.
    pub async fn get_provenance(&self, id: ResourceId) -> Result<Vec<LabelSummary>, EngineError> {
        self.dispatch(|reply| Command::GetProvenance { id, reply }).await?
    }

    /// OR-merges policy flags into an enrolled label under an exclusive hold.
    pub async fn set_policy(
        &self,
        id: ResourceId,
        flags: ComplianceFlags,
    ) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::SetPolicy { id, flags, reply }).await?
    }

    /// Inbound M2M: holds the local side of `stream` exclusively until the
    /// matching provenance sync arrives or the reservation deadline fires.
    /// `from` carries the calling middleware's identity for peer learning.
    pub async fn reserve_remote(
        &self,
        stream: ResourceId,
        from: Option<(NodeId, SocketAddr)>,
    ) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::ReserveRemote {
            stream,
            from,
            reply,
        })
        .await?
    }

    /// Inbound M2M: unions the received summaries into the reserved stream
    /// label and releases the reservation.
    pub async fn sync_remote(
        &self,
        stream: ResourceId,
        summaries: Vec<LabelSummary>,
    ) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::SyncRemote {
            stream,
            summaries,
            reply,
        })
        .await?
    }

    /// Adds a peer-routing entry: traffic to `peer_socket` belongs to
    /// `node`, reachable for M2M at `endpoint`.
    pub async fn add_peer(
        &self,
        peer_socket: SocketAddr,
        node: NodeId,
        endpoint: SocketAddr,
    ) -> Result<(), EngineError> {
        self.dispatch(|reply| Command::AddPeer {
            peer_socket,
            node,
            endpoint,
            reply,
        })
        .await
    }

    /// Full map dump, one line per label, sorted by the global id order.
    pub async fn dump(&self) -> Result<Vec<String>, EngineError> {
        self.dispatch(|reply| Command::Dump { reply }).await
    }

    pub async fn settle_log(&self) -> Result<Vec<SettledFlow>, EngineError> {
        self.dispatch(|reply| Command::SettleLog { reply }).await
    }

    pub async fn stats(&self) -> Result<EngineStats, EngineError> {
        let (labels, active_grants, remote_holds) =
            self.dispatch(|reply| Command::Sizes { reply }).await?;
        Ok(EngineStats {
            labels,
            active_grants,
            remote_holds,
            grants_issued: self.counters.issued.load(Ordering::SeqCst),
            grants_denied: self.counters.denied.load(Ordering::SeqCst),
            grants_timed_out: self.counters.timed_out.load(Ordering::SeqCst),
            grants_expired: self.counters.expired.load(Ordering::SeqCst),
            flows_settled: self.counters.settled.load(Ordering::SeqCst),
            remote_expired: self.counters.remote_expired.load(Ordering::SeqCst),
            violations: self.counters.violations.load(Ordering::SeqCst),
        })
    }

    /// Stops the owner task. Outstanding grants are dropped with their
    /// reservations; subsequent calls return `Closed`.
    pub async fn shutdown(&self) {
        let _ = self.tx.send(Command::Shutdown).await;
    }
}
