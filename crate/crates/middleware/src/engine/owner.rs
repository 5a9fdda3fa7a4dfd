//! The engine owner task and the per-grant reservation jobs it spawns.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::{Arc, RwLock as StdRwLock};
use std::time::Duration;

use tokio::sync::{mpsc, oneshot};
use tokio::time::{sleep_until, timeout_at, Instant};

use flowtrace_core::{
    ComplianceFlags, Flow, FlowOutcome, Grant, GrantId, Label, LabelSummary, NodeId, ResourceId,
};

use crate::compliance::{Chain, FlowContext, Verdict};
use crate::m2m::M2mClient;
use crate::wirelog::WireLog;

use super::slots::{ExclusiveHold, LabelSlot, SharedHold};
use super::{Counters, EngineConfig, EngineError, FlowDecision, SettledFlow};

pub(crate) enum Command {
    Enroll {
        id: ResourceId,
        flags: ComplianceFlags,
        reply: oneshot::Sender<()>,
    },
    RequestFlow {
        flow: Flow,
        reply: oneshot::Sender<Result<FlowDecision, EngineError>>,
    },
    GrantReady {
        grant_id: GrantId,
        pending: Box<PendingGrant>,
        deadline: Instant,
        ack: oneshot::Sender<()>,
    },
    ReportFlow {
        grant_id: GrantId,
        outcome: FlowOutcome,
        reply: oneshot::Sender<Result<(), EngineError>>,
    },
    Expire {
        grant_id: GrantId,
    },
    GetProvenance {
        id: ResourceId,
        reply: oneshot::Sender<Result<Vec<LabelSummary>, EngineError>>,
    },
    SetPolicy {
        id: ResourceId,
        flags: ComplianceFlags,
        reply: oneshot::Sender<Result<(), EngineError>>,
    },
    ReserveRemote {
        stream: ResourceId,
        from: Option<(NodeId, SocketAddr)>,
        reply: oneshot::Sender<Result<(), EngineError>>,
    },
    RemoteHoldReady {
        stream: ResourceId,
        hold: ExclusiveHold,
        deadline: Instant,
        ack: oneshot::Sender<()>,
    },
    SyncRemote {
        stream: ResourceId,
        summaries: Vec<LabelSummary>,
        reply: oneshot::Sender<Result<(), EngineError>>,
    },
    ExpireRemote {
        stream: ResourceId,
        generation: u64,
    },
    AddPeer {
        peer_socket: SocketAddr,
        node: NodeId,
        endpoint: SocketAddr,
        reply: oneshot::Sender<()>,
    },
    Dump {
        reply: oneshot::Sender<Vec<String>>,
    },
    SettleLog {
        reply: oneshot::Sender<Vec<SettledFlow>>,
    },
    Sizes {
        reply: oneshot::Sender<(usize, usize, usize)>,
    },
    Shutdown,
}

/// Where a peer socket leads, as far as this node can tell.
enum PeerLocality {
    Local,
    Remote { node: NodeId, endpoint: SocketAddr },
    Unknown,
}

/// Socket-level topology knowledge: statically configured peers, peers
/// learned from inbound Reserve messages, and the local sockets of streams
/// enrolled on this node. Sockets that resolve nowhere are treated as
/// external: an endpoint we cannot vouch for is off-node by assumption.
pub(crate) struct PeerRegistry {
    node: NodeId,
    by_socket: HashMap<SocketAddr, (NodeId, SocketAddr)>,
    local_sockets: HashSet<SocketAddr>,
}

impl PeerRegistry {
    fn resolve(&self, socket: SocketAddr) -> PeerLocality {
        if let Some((node, endpoint)) = self.by_socket.get(&socket) {
            if *node == self.node {
                PeerLocality::Local
            } else {
                PeerLocality::Remote {
                    node: node.clone(),
                    endpoint: *endpoint,
                }
            }
        } else if self.local_sockets.contains(&socket) {
            PeerLocality::Local
        } else {
            PeerLocality::Unknown
        }
    }

    fn learn(&mut self, peer_socket: SocketAddr, node: NodeId, endpoint: SocketAddr) {
        self.by_socket.insert(peer_socket, (node, endpoint));
    }

    fn note_local_socket(&mut self, socket: SocketAddr) {
        self.local_sockets.insert(socket);
    }

    /// An id is external when it names another node outright, or when it is
    /// a stream whose far end does not resolve to this node.
    fn id_is_external(&self, id: &ResourceId) -> bool {
        if id.node() != &self.node {
            return true;
        }
        match id.stream_sockets() {
            Some((_, peer)) => !matches!(self.resolve(peer), PeerLocality::Local),
            None => false,
        }
    }
}

/// The peer middleware to coordinate with for a cross-node stream flow.
pub(crate) struct RemoteTarget {
    endpoint: SocketAddr,
    /// The stream id as the peer sees it (sockets swapped, its node).
    mirrored: ResourceId,
}

pub(crate) struct PendingGrant {
    flow: Flow,
    source_hold: SharedHold,
    dest_hold: ExclusiveHold,
    remote: Option<RemoteTarget>,
}

fn build_context(
    flow: &Flow,
    source: &Label,
    destination: &Label,
    registry: &PeerRegistry,
) -> (FlowContext, Option<RemoteTarget>) {
    let (destination_is_external, remote) = match flow.destination().stream_sockets() {
        Some((_, peer)) => match registry.resolve(peer) {
            PeerLocality::Local => (false, None),
            PeerLocality::Remote { node, endpoint } => {
                let mirrored = flow
                    .destination()
                    .mirrored_stream(node)
                    .expect("destination with stream sockets mirrors");
                (true, Some(RemoteTarget { endpoint, mirrored }))
            }
            PeerLocality::Unknown => (true, None),
        },
        None => (false, None),
    };
    let source_is_external_origin = registry.id_is_external(&source.id)
        || source.provenance.ids().any(|id| registry.id_is_external(id));
    let ctx = FlowContext {
        source_label: source.clone(),
        destination_label: destination.clone(),
        destination_is_external,
        source_is_external_origin,
    };
    (ctx, remote)
}

/// Everything one authorization needs, detached from the owner so the
/// acquisition can block without stalling other requests.
struct GrantJob {
    grant_id: GrantId,
    flow: Flow,
    source_slot: LabelSlot,
    dest_slot: LabelSlot,
    deadline: Instant,
    chain: Arc<Chain>,
    registry: Arc<StdRwLock<PeerRegistry>>,
    counters: Arc<Counters>,
    wirelog: Arc<WireLog>,
    node: NodeId,
    m2m_endpoint: Option<SocketAddr>,
    owner: mpsc::Sender<Command>,
}

impl GrantJob {
    async fn run(self, reply: oneshot::Sender<Result<FlowDecision, EngineError>>) {
        let violations = &self.counters.violations;
        // Acquire in the global id order regardless of flow direction; that
        // single rule is what makes cross-grant deadlock impossible.
        let source_first = self.flow.source() < self.flow.destination();
        let acquired = if source_first {
            match timeout_at(self.deadline, self.source_slot.acquire_shared(violations)).await {
                Ok(source) => {
                    match timeout_at(self.deadline, self.dest_slot.acquire_exclusive(violations))
                        .await
                    {
                        Ok(dest) => Some((source, dest)),
                        Err(_) => None,
                    }
                }
                Err(_) => None,
            }
        } else {
            match timeout_at(self.deadline, self.dest_slot.acquire_exclusive(violations)).await {
                Ok(dest) => {
                    match timeout_at(self.deadline, self.source_slot.acquire_shared(violations))
                        .await
                    {
                        Ok(source) => Some((source, dest)),
                        Err(_) => None,
                    }
                }
                Err(_) => None,
            }
        };
        let Some((source_hold, dest_hold)) = acquired else {
            self.counters.timed_out.fetch_add(1, Ordering::SeqCst);
            let _ = reply.send(Ok(FlowDecision::TimedOut));
            return;
        };

        // Policy runs with both reservations held, before anything escapes.
        let (ctx, remote) = {
            let registry = self.registry.read().unwrap();
            build_context(&self.flow, source_hold.label(), dest_hold.label(), &registry)
        };
        if let Verdict::Deny { policy } = self.chain.check(&ctx) {
            self.counters.denied.fetch_add(1, Ordering::SeqCst);
            let _ = reply.send(Ok(FlowDecision::Denied { policy }));
            return;
        }

        // A remote-peered destination must be reserved on the peer before
        // the grant is handed out. Any peer failure fails closed.
        if let Some(target) = &remote {
            let client = M2mClient::new(self.wirelog.clone());
            let reserved = client
                .reserve(
                    target.endpoint,
                    &target.mirrored,
                    &self.node,
                    self.m2m_endpoint,
                    self.deadline,
                )
                .await;
            if reserved.is_err() {
                self.counters.timed_out.fetch_add(1, Ordering::SeqCst);
                let _ = reply.send(Ok(FlowDecision::TimedOut));
                return;
            }
        }

        let pending = Box::new(PendingGrant {
            flow: self.flow.clone(),
            source_hold,
            dest_hold,
            remote,
        });
        let (ack_tx, ack_rx) = oneshot::channel();
        let registered = self
            .owner
            .send(Command::GrantReady {
                grant_id: self.grant_id.clone(),
                pending,
                deadline: self.deadline,
                ack: ack_tx,
            })
            .await;
        if registered.is_err() || ack_rx.await.is_err() {
            let _ = reply.send(Err(EngineError::Closed));
            return;
        }
        self.counters.issued.fetch_add(1, Ordering::SeqCst);
        let grant = Grant {
            grant_id: self.grant_id,
            flow: self.flow,
            issued_at: std::time::Instant::now(),
        };
        let _ = reply.send(Ok(FlowDecision::Granted(grant)));
    }
}

pub(crate) struct Owner {
    node: NodeId,
    timeout: Duration,
    m2m_endpoint: Option<SocketAddr>,
    labels: BTreeMap<ResourceId, LabelSlot>,
    grants: HashMap<GrantId, Box<PendingGrant>>,
    remote_holds: HashMap<ResourceId, (u64, ExclusiveHold)>,
    remote_generation: u64,
    registry: Arc<StdRwLock<PeerRegistry>>,
    chain: Arc<Chain>,
    wirelog: Arc<WireLog>,
    counters: Arc<Counters>,
    grant_counter: u64,
    settle_seq: u64,
    settle_log: Vec<SettledFlow>,
    tx: mpsc::Sender<Command>,
}

impl Owner {
    pub fn new(
        config: EngineConfig,
        tx: mpsc::Sender<Command>,
        chain: Arc<Chain>,
        wirelog: Arc<WireLog>,
        counters: Arc<Counters>,
    ) -> Self {
        let mut registry = PeerRegistry {
            node: config.node.clone(),
            by_socket: HashMap::new(),
            local_sockets: HashSet::new(),
        };
        for peer in &config.peers {
            registry.learn(peer.peer_socket, peer.node.clone(), peer.m2m_endpoint);
        }
        Self {
            node: config.node,
            timeout: config.reservation_timeout,
            m2m_endpoint: config.m2m_endpoint,
            labels: BTreeMap::new(),
            grants: HashMap::new(),
            remote_holds: HashMap::new(),
            remote_generation: 0,
            registry: Arc::new(StdRwLock::new(registry)),
            chain,
            wirelog,
            counters,
            grant_counter: 0,
            settle_seq: 0,
            settle_log: Vec::new(),
            tx,
        }
    }

    pub async fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        while let Some(command) = rx.recv().await {
            if !self.handle(command) {
                break;
            }
        }
    }

    fn insert_slot(&mut self, id: ResourceId, flags: ComplianceFlags) -> LabelSlot {
        if let Some((local, _)) = id.stream_sockets() {
            self.registry.write().unwrap().note_local_socket(local);
        }
        let slot = LabelSlot::new(id.clone(), flags);
        self.labels.insert(id, slot.clone());
        slot
    }

    fn ensure_slot(&mut self, id: &ResourceId) -> LabelSlot {
        match self.labels.get(id) {
            Some(slot) => slot.clone(),
            None => self.insert_slot(id.clone(), ComplianceFlags::NONE),
        }
    }

    fn handle(&mut self, command: Command) -> bool {
        match command {
            Command::Enroll { id, flags, reply } => self.on_enroll(id, flags, reply),
            Command::RequestFlow { flow, reply } => self.on_request_flow(flow, reply),
            Command::GrantReady {
                grant_id,
                pending,
                deadline,
                ack,
            } => self.on_grant_ready(grant_id, pending, deadline, ack),
            Command::ReportFlow {
                grant_id,
                outcome,
                reply,
            } => self.on_report_flow(grant_id, outcome, reply),
            Command::Expire { grant_id } => {
                if self.grants.remove(&grant_id).is_some() {
                    self.counters.expired.fetch_add(1, Ordering::SeqCst);
                }
            }
            Command::GetProvenance { id, reply } => self.on_get_provenance(id, reply),
            Command::SetPolicy { id, flags, reply } => self.on_set_policy(id, flags, reply),
            Command::ReserveRemote {
                stream,
                from,
                reply,
            } => self.on_reserve_remote(stream, from, reply),
            Command::RemoteHoldReady {
                stream,
                hold,
                deadline,
                ack,
            } => self.on_remote_hold_ready(stream, hold, deadline, ack),
            Command::SyncRemote {
                stream,
                summaries,
                reply,
            } => self.on_sync_remote(stream, summaries, reply),
            Command::ExpireRemote { stream, generation } => {
                if self
                    .remote_holds
                    .get(&stream)
                    .is_some_and(|(current, _)| *current == generation)
                {
                    self.remote_holds.remove(&stream);
                    self.counters.remote_expired.fetch_add(1, Ordering::SeqCst);
                }
            }
            Command::AddPeer {
                peer_socket,
                node,
                endpoint,
                reply,
            } => {
                self.registry.write().unwrap().learn(peer_socket, node, endpoint);
                let _ = reply.send(());
            }
            Command::Dump { reply } => {
                let _ = reply.send(self.render_dump());
            }
            Command::SettleLog { reply } => {
                let _ = reply.send(self.settle_log.clone());
            }
            Command::Sizes { reply } => {
                let _ = reply.send((
                    self.labels.len(),
                    self.grants.len(),
                    self.remote_holds.len(),
                ));
            }
            Command::Shutdown => return false,
        }
        true
    }

    fn on_enroll(&mut self, id: ResourceId, flags: ComplianceFlags, reply: oneshot::Sender<()>) {
        match self.labels.get(&id) {
            None => {
                self.insert_slot(id, flags);
                let _ = reply.send(());
            }
            Some(_) if flags.is_none() => {
                let _ = reply.send(());
            }
            Some(slot) => {
                let slot = slot.clone();
                let counters = self.counters.clone();
                tokio::spawn(async move {
                    let mut hold = slot.acquire_exclusive(&counters.violations).await;
                    let label = hold.label_mut();
                    label.flags = label.flags.merge(flags);
                    drop(hold);
                    let _ = reply.send(());
                });
            }
        }
    }

    fn on_request_flow(
        &mut self,
        flow: Flow,
        reply: oneshot::Sender<Result<FlowDecision, EngineError>>,
    ) {
        let source_slot = self.ensure_slot(flow.source());
        let dest_slot = self.ensure_slot(flow.destination());
        self.grant_counter += 1;
        let job = GrantJob {
            grant_id: GrantId::new(self.node.clone(), self.grant_counter),
            flow,
            source_slot,
            dest_slot,
            deadline: Instant::now() + self.timeout,
            chain: self.chain.clone(),
            registry: self.registry.clone(),
            counters: self.counters.clone(),
            wirelog: self.wirelog.clone(),
            node: self.node.clone(),
            m2m_endpoint: self.m2m_endpoint,
            owner: self.tx.clone(),
        };
        tokio::spawn(job.run(reply));
    }

    fn on_grant_ready(
        &mut self,
        grant_id: GrantId,
        pending: Box<PendingGrant>,
        deadline: Instant,
        ack: oneshot::Sender<()>,
    ) {
        self.grants.insert(grant_id.clone(), pending);
        let tx = self.tx.clone();
        tokio::spawn(async move {
            sleep_until(deadline).await;
            let _ = tx.send(Command::Expire { grant_id }).await;
        });
        let _ = ack.send(());
    }

    fn on_report_flow(
        &mut self,
        grant_id: GrantId,
        outcome: FlowOutcome,
        reply: oneshot::Sender<Result<(), EngineError>>,
    ) {
        let Some(pending) = self.grants.remove(&grant_id) else {
            let _ = reply.send(Err(EngineError::StaleGrant(grant_id)));
            return;
        };
        let PendingGrant {
            flow,
            source_hold,
            mut dest_hold,
            remote,
        } = *pending;

        // Success applies the update rule through the held guards; the
        // moment it lands here is the flow's linearization point.
        let mut updated: Vec<LabelSummary> = Vec::new();
        if outcome == FlowOutcome::Success {
            let source_label = source_hold.label();
            let incoming: Vec<LabelSummary> = source_label
                .provenance
                .iter()
                .chain(std::iter::once(source_label.summary()))
                .collect();
            let dest = dest_hold.label_mut();
            dest.merge_summaries(incoming);
            updated = dest.provenance.iter().collect();
            self.settle_seq += 1;
            self.settle_log.push(SettledFlow {
                seq: self.settle_seq,
                source: flow.source().clone(),
                destination: flow.destination().clone(),
            });
            self.counters.settled.fetch_add(1, Ordering::SeqCst);
        }
        drop(source_hold);
        drop(dest_hold);

        match remote {
            None => {
                let _ = reply.send(Ok(()));
            }
            Some(target) => {
                // The peer holds its side reserved since our Reserve. Push
                // the update (empty after a failed execution: it changes
                // nothing but lets the peer release) and ack only once the
                // peer acked.
                let wirelog = self.wirelog.clone();
                let deadline = Instant::now() + self.timeout;
                tokio::spawn(async move {
                    let client = M2mClient::new(wirelog);
                    let result = client
                        .sync(target.endpoint, &target.mirrored, updated, deadline)
                        .await
                        .map_err(|e| EngineError::PeerUnreachable(e.to_string()));
                    let _ = reply.send(result);
                });
            }
        }
    }

    fn on_get_provenance(
        &mut self,
        id: ResourceId,
        reply: oneshot::Sender<Result<Vec<LabelSummary>, EngineError>>,
    ) {
        let Some(slot) = self.labels.get(&id) else {
            let _ = reply.send(Err(EngineError::UnknownResource(id)));
            return;
        };
        let slot = slot.clone();
        let counters = self.counters.clone();
        tokio::spawn(async move {
            let hold = slot.acquire_shared(&counters.violations).await;
            let entries: Vec<LabelSummary> = hold.label().provenance.iter().collect();
            drop(hold);
            let _ = reply.send(Ok(entries));
        });
    }

    fn on_set_policy(
        &mut self,
        id: ResourceId,
        flags: ComplianceFlags,
        reply: oneshot::Sender<Result<(), EngineError>>,
    ) {
        let Some(slot) = self.labels.get(&id) else {
            let _ = reply.send(Err(EngineError::UnknownResource(id)));
            return;
        };
        let slot = slot.clone();
        let counters = self.counters.clone();
        tokio::spawn(async move {
            let mut hold = slot.acquire_exclusive(&counters.violations).await;
            let label = hold.label_mut();
            label.flags = label.flags.merge(flags);
            drop(hold);
            let _ = reply.send(Ok(()));
        });
    }

    fn on_reserve_remote(
        &mut self,
        stream: ResourceId,
        from: Option<(NodeId, SocketAddr)>,
        reply: oneshot::Sender<Result<(), EngineError>>,
    ) {
        if !stream.is_stream() {
            let _ = reply.send(Err(EngineError::Invalid(format!(
                "reserve target is not a stream: {stream}"
            ))));
            return;
        }
        // The caller names itself so we can route flows on this stream back
        // to it later; its socket is the far end of our local view.
        if let (Some((node, endpoint)), Some((_, peer_socket))) = (&from, stream.stream_sockets()) {
            self.registry
                .write()
                .unwrap()
                .learn(peer_socket, node.clone(), *endpoint);
        }
        let slot = self.ensure_slot(&stream);
        let deadline = Instant::now() + self.timeout;
        let hold_timeout = self.timeout;
        let counters = self.counters.clone();
        let tx = self.tx.clone();
        tokio::spawn(async move {
            match timeout_at(deadline, slot.acquire_exclusive(&counters.violations)).await {
                Err(_) => {
                    let _ = reply.send(Err(EngineError::Timeout));
                }
                Ok(hold) => {
                    let (ack_tx, ack_rx) = oneshot::channel();
                    let registered = tx
                        .send(Command::RemoteHoldReady {
                            stream,
                            hold,
                            deadline: Instant::now() + hold_timeout,
                            ack: ack_tx,
                        })
                        .await;
                    if registered.is_err() || ack_rx.await.is_err() {
                        let _ = reply.send(Err(EngineError::Closed));
                        return;
                    }
                    let _ = reply.send(Ok(()));
                }
            }
        });
    }

    fn on_remote_hold_ready(
        &mut self,
        stream: ResourceId,
        hold: ExclusiveHold,
        deadline: Instant,
        ack: oneshot::Sender<()>,
    ) {
        self.remote_generation += 1;
        let generation = self.remote_generation;
        self.remote_holds.insert(stream.clone(), (generation, hold));
        let tx = self.tx.clone();
        tokio::spawn(async move {
            sleep_until(deadline).await;
            let _ = tx.send(Command::ExpireRemote { stream, generation }).await;
        });
        let _ = ack.send(());
    }

    fn on_sync_remote(
        &mut self,
        stream: ResourceId,
        summaries: Vec<LabelSummary>,
        reply: oneshot::Sender<Result<(), EngineError>>,
    ) {
        match self.remote_holds.remove(&stream) {
            None => {
                let _ = reply.send(Err(EngineError::StaleSync(stream)));
            }
            Some((_, mut hold)) => {
                hold.label_mut().merge_summaries(summaries);
                drop(hold);
                let _ = reply.send(Ok(()));
            }
        }
    }

    fn render_dump(&self) -> Vec<String> {
        let mut lines = Vec::with_capacity(self.labels.len());
        for (id, slot) in &self.labels {
            let line = match slot.try_snapshot() {
                Some(label) => {
                    let provenance = if label.provenance.is_empty() {
                        "(none)".to_string()
                    } else {
                        label
                            .provenance
                            .iter()
                            .map(|s| s.id.canonical())
                            .collect::<Vec<_>>()
                            .join(", ")
                    };
                    format!("{} [{}] <- {}", id, label.flags, provenance)
                }
                None => format!("{id} <- (reserved)"),
            };
            lines.push(line);
        }
        lines
    }
}
