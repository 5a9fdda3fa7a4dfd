//! Cross-node coordination: reservation and provenance sync between two
//! live middleware instances over their peer listeners.

mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use tokio::net::{TcpListener, TcpStream};

use flowtrace_core::proto::{
    self, Channel, Direction, ErrorCode, M2mRequest, M2mResponse, ProvenanceEntry,
};
use flowtrace_core::{ComplianceFlags, Flow, FlowOutcome, ResourceId};
use flowtrace_middleware::{EngineError, FlowDecision, Middleware, MiddlewareConfig, PeerSpec};

use common::{nid, proc_id, sock, start_node, stream_id};

const SOCK_A: &str = "10.0.0.1:41000";
const SOCK_B: &str = "10.0.0.2:41000";

/// Two nodes wired to each other: each knows the far socket of the shared
/// stream and which middleware answers for it.
async fn start_pair(timeout_a: Duration, timeout_b: Duration) -> (Middleware, Middleware) {
    let mut config_b = MiddlewareConfig::new(nid("beta"));
    config_b.p2m_addr = sock("127.0.0.1:0");
    config_b.m2m_addr = sock("127.0.0.1:0");
    config_b.reservation_timeout = timeout_b;
    let beta = Middleware::start(config_b).await.unwrap();

    let mut config_a = MiddlewareConfig::new(nid("alpha"));
    config_a.p2m_addr = sock("127.0.0.1:0");
    config_a.m2m_addr = sock("127.0.0.1:0");
    config_a.reservation_timeout = timeout_a;
    config_a.peers = vec![PeerSpec {
        peer_socket: sock(SOCK_B),
        node: nid("beta"),
        m2m_endpoint: beta.m2m_addr(),
    }];
    let alpha = Middleware::start(config_a).await.unwrap();

    beta.engine()
        .add_peer(sock(SOCK_A), nid("alpha"), alpha.m2m_addr())
        .await
        .unwrap();

    (alpha, beta)
}

async fn prov_ids(mw: &Middleware, id: &ResourceId) -> BTreeSet<ResourceId> {
    mw.engine()
        .get_provenance(id.clone())
        .await
        .unwrap()
        .into_iter()
        .map(|s| s.id)
        .collect()
}

#[tokio::test]
async fn provenance_crosses_the_node_boundary() {
    let (alpha, beta) = start_pair(Duration::from_secs(5), Duration::from_secs(5)).await;
    let p1 = proc_id("alpha", 100);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);
    let s_beta = stream_id("beta", SOCK_B, SOCK_A);
    let p2 = proc_id("beta", 200);

    alpha
        .engine()
        .enroll(p1.clone(), ComplianceFlags::integral())
        .await
        .unwrap();

    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1.clone(), s_alpha.clone()).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant, got {other:?}"),
    };

    // While the grant is live, the far side holds its view of the stream.
    let stats = beta.engine().stats().await.unwrap();
    assert_eq!(stats.remote_holds, 1);

    alpha
        .engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await
        .unwrap();

    // The ack trailed beta's ack, so beta's label is already current.
    assert_eq!(prov_ids(&alpha, &s_alpha).await, BTreeSet::from([p1.clone()]));
    assert_eq!(prov_ids(&beta, &s_beta).await, BTreeSet::from([p1.clone()]));
    assert_eq!(beta.engine().stats().await.unwrap().remote_holds, 0);

    // Flags crossed too: beta sees the entry with its policy bit intact.
    let entries = beta.engine().get_provenance(s_beta.clone()).await.unwrap();
    assert!(entries.iter().any(|e| e.id == p1 && e.flags.integrity));

    // Local hop on beta: the stream's history lands on the reader.
    let decision = beta
        .engine()
        .request_flow(Flow::new(s_beta.clone(), p2.clone()).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant, got {other:?}"),
    };
    beta.engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await
        .unwrap();
    let got = prov_ids(&beta, &p2).await;
    assert!(got.is_superset(&BTreeSet::from([s_beta, p1])), "got {got:?}");

    assert!(alpha.wirelog().count(Channel::M2m, Direction::Out, "reserve") >= 1);
    assert!(alpha.wirelog().count(Channel::M2m, Direction::Out, "sync_provenance") >= 1);
    assert!(beta.wirelog().count(Channel::M2m, Direction::In, "reserve") >= 1);

    alpha.shutdown().await;
    beta.shutdown().await;
}

#[tokio::test]
async fn confidential_data_stays_off_cross_node_streams() {
    // A stream to a peer node is still an external destination; knowing
    // which middleware answers for it does not make it local.
    let (alpha, beta) = start_pair(Duration::from_secs(5), Duration::from_secs(5)).await;
    let p1 = proc_id("alpha", 1);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);

    alpha
        .engine()
        .enroll(p1.clone(), ComplianceFlags::confidential())
        .await
        .unwrap();
    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1, s_alpha).unwrap())
        .await
        .unwrap();
    match decision {
        FlowDecision::Denied { policy } => assert_eq!(policy, "local_confidentiality"),
        other => panic!("expected denial, got {other:?}"),
    }
    // Denied before any coordination: beta never saw a reserve.
    assert_eq!(beta.wirelog().count(Channel::M2m, Direction::In, "reserve"), 0);

    alpha.shutdown().await;
    beta.shutdown().await;
}

#[tokio::test]
async fn receiver_learns_the_sender_for_the_reverse_path() {
    // Beta starts with no peer table at all.
    let mut config_b = MiddlewareConfig::new(nid("beta"));
    config_b.p2m_addr = sock("127.0.0.1:0");
    config_b.m2m_addr = sock("127.0.0.1:0");
    let beta = Middleware::start(config_b).await.unwrap();

    let mut config_a = MiddlewareConfig::new(nid("alpha"));
    config_a.p2m_addr = sock("127.0.0.1:0");
    config_a.m2m_addr = sock("127.0.0.1:0");
    config_a.peers = vec![PeerSpec {
        peer_socket: sock(SOCK_B),
        node: nid("beta"),
        m2m_endpoint: beta.m2m_addr(),
    }];
    let alpha = Middleware::start(config_a).await.unwrap();

    let p1 = proc_id("alpha", 1);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);
    let s_beta = stream_id("beta", SOCK_B, SOCK_A);

    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1, s_alpha).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant, got {other:?}"),
    };
    alpha
        .engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await
        .unwrap();

    // The inbound reservation carried alpha's identity, so a flow from
    // beta's side can now route back without any static entry.
    let p2 = proc_id("beta", 2);
    let decision = beta
        .engine()
        .request_flow(Flow::new(p2, s_beta).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant routed via learned peer, got {other:?}"),
    };
    beta.engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await
        .unwrap();
    assert!(alpha.wirelog().count(Channel::M2m, Direction::In, "reserve") >= 1);

    alpha.shutdown().await;
    beta.shutdown().await;
}

#[tokio::test]
async fn late_sync_after_peer_expiry_is_rejected() {
    // Beta force-releases remote holds quickly; alpha's report then arrives
    // after the reservation died.
    let (alpha, beta) = start_pair(Duration::from_secs(5), Duration::from_millis(250)).await;
    let p1 = proc_id("alpha", 1);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);
    let s_beta = stream_id("beta", SOCK_B, SOCK_A);

    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1.clone(), s_alpha.clone()).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant, got {other:?}"),
    };

    tokio::time::sleep(Duration::from_millis(600)).await;
    let result = alpha
        .engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await;
    assert!(matches!(result, Err(EngineError::PeerUnreachable(_))), "{result:?}");

    // The local update is kept; only the propagation failed.
    assert_eq!(prov_ids(&alpha, &s_alpha).await, BTreeSet::from([p1]));
    assert!(prov_ids(&beta, &s_beta).await.is_empty());
    assert_eq!(beta.engine().stats().await.unwrap().remote_expired, 1);

    alpha.shutdown().await;
    beta.shutdown().await;
}

#[tokio::test]
async fn unreachable_peer_fails_closed() {
    // A peer entry pointing at a dead port: the reserve can't happen, so
    // no grant may be issued.
    let dead = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let dead_addr = dead.local_addr().unwrap();
    drop(dead);

    let mut config = MiddlewareConfig::new(nid("alpha"));
    config.p2m_addr = sock("127.0.0.1:0");
    config.m2m_addr = sock("127.0.0.1:0");
    config.peers = vec![PeerSpec {
        peer_socket: sock(SOCK_B),
        node: nid("beta"),
        m2m_endpoint: dead_addr,
    }];
    let alpha = Middleware::start(config).await.unwrap();

    let p1 = proc_id("alpha", 1);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);
    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1, s_alpha).unwrap())
        .await
        .unwrap();
    assert!(matches!(decision, FlowDecision::TimedOut), "{decision:?}");
    assert_eq!(alpha.engine().stats().await.unwrap().grants_timed_out, 1);

    alpha.shutdown().await;
}

#[tokio::test]
async fn peer_death_after_grant_keeps_local_update() {
    let (alpha, beta) = start_pair(Duration::from_millis(800), Duration::from_millis(800)).await;
    let p1 = proc_id("alpha", 1);
    let s_alpha = stream_id("alpha", SOCK_A, SOCK_B);

    let decision = alpha
        .engine()
        .request_flow(Flow::new(p1.clone(), s_alpha.clone()).unwrap())
        .await
        .unwrap();
    let grant = match decision {
        FlowDecision::Granted(grant) => grant,
        other => panic!("expected grant, got {other:?}"),
    };

    beta.shutdown().await;
    let result = alpha
        .engine()
        .report_flow(grant.grant_id, FlowOutcome::Success)
        .await;
    assert!(matches!(result, Err(EngineError::PeerUnreachable(_))), "{result:?}");
    assert_eq!(prov_ids(&alpha, &s_alpha).await, BTreeSet::from([p1]));

    alpha.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_streams_sync_independently() {
    let (alpha, beta) = start_pair(Duration::from_secs(5), Duration::from_secs(5)).await;

    let mut tasks = Vec::new();
    for k in 0..4u32 {
        let engine = alpha.engine().clone();
        let local = format!("10.0.0.1:{}", 42000 + k);
        let remote = format!("10.0.0.2:{}", 42000 + k);
        let beta_m2m = beta.m2m_addr();
        tasks.push(tokio::spawn(async move {
            engine
                .add_peer(sock(&remote), nid("beta"), beta_m2m)
                .await
                .unwrap();
            let p = proc_id("alpha", k);
            let s = stream_id("alpha", &local, &remote);
            let decision = engine
                .request_flow(Flow::new(p, s).unwrap())
                .await
                .unwrap();
            let FlowDecision::Granted(grant) = decision else {
                panic!("stream {k}: {decision:?}");
            };
            engine
                .report_flow(grant.grant_id, FlowOutcome::Success)
                .await
                .unwrap();
        }));
    }
    for task in tasks {
        task.await.unwrap();
    }

    for k in 0..4u32 {
        let s_beta = stream_id(
            "beta",
            &format!("10.0.0.2:{}", 42000 + k),
            &format!("10.0.0.1:{}", 42000 + k),
        );
        let got = prov_ids(&beta, &s_beta).await;
        assert_eq!(got, BTreeSet::from([proc_id("alpha", k)]), "stream {k}");
    }

    alpha.shutdown().await;
    beta.shutdown().await;
}

async fn raw_m2m(addr: std::net::SocketAddr, request: &M2mRequest) -> M2mResponse {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    proto::write_frame_async(&mut stream, request).await.unwrap();
    proto::read_frame_async(&mut stream).await.unwrap()
}

#[tokio::test]
async fn reserve_rejects_non_stream_targets() {
    let beta = start_node("beta", Duration::from_secs(5)).await;
    let response = raw_m2m(
        beta.m2m_addr(),
        &M2mRequest::Reserve {
            stream: proc_id("beta", 1).canonical(),
            from_node: "alpha".into(),
            from_endpoint: "127.0.0.1:1".into(),
        },
    )
    .await;
    match response {
        M2mResponse::Error(e) => assert_eq!(e.code, ErrorCode::MalformedId),
        other => panic!("expected error, got {other:?}"),
    }
    beta.shutdown().await;
}

#[tokio::test]
async fn sync_without_reservation_is_stale() {
    let beta = start_node("beta", Duration::from_secs(5)).await;
    let response = raw_m2m(
        beta.m2m_addr(),
        &M2mRequest::SyncProvenance {
            stream: stream_id("beta", SOCK_B, SOCK_A).canonical(),
            provenance: vec![ProvenanceEntry {
                id: proc_id("alpha", 1).canonical(),
                flags: ComplianceFlags::NONE,
            }],
        },
    )
    .await;
    match response {
        M2mResponse::Error(e) => assert_eq!(e.code, ErrorCode::StaleGrant),
        other => panic!("expected error, got {other:?}"),
    }
    beta.shutdown().await;
}
