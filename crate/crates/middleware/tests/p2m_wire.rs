//! The process-facing protocol over real sockets: framing, error codes,
//! and robustness against garbage input.

mod common;

use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use flowtrace_core::proto::{ErrorCode, GrantMsg, P2mRequest, P2mResponse};
use flowtrace_core::{ComplianceFlags, FlowOutcome};

use common::{file_id, proc_id, start_node, RawClient};

fn expect_error(response: P2mResponse, code: ErrorCode) {
    match response {
        P2mResponse::Error(e) => assert_eq!(e.code, code, "{}", e.message),
        other => panic!("expected {code} error, got {other:?}"),
    }
}

#[tokio::test]
async fn full_exchange_over_the_wire() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    let p = proc_id("n1", 42);
    let f = file_id("n1", "/wire/f");

    assert!(matches!(
        client.enroll(&p, ComplianceFlags::NONE).await,
        P2mResponse::Ack
    ));
    assert!(matches!(
        client.enroll(&f, ComplianceFlags::NONE).await,
        P2mResponse::Ack
    ));

    let grant_id = match client.io_request(&p, &f).await {
        P2mResponse::Grant(GrantMsg::Granted { grant_id }) => grant_id,
        other => panic!("expected grant, got {other:?}"),
    };

    let response = client
        .call(&P2mRequest::IoReport {
            grant_id,
            outcome: FlowOutcome::Success,
        })
        .await;
    assert!(matches!(response, P2mResponse::Ack));

    match client
        .call(&P2mRequest::ProvenanceQuery { id: f.canonical() })
        .await
    {
        P2mResponse::Provenance { entries } => {
            assert_eq!(entries.len(), 1);
            assert_eq!(entries[0].id, p.canonical());
        }
        other => panic!("expected provenance, got {other:?}"),
    }

    node.shutdown().await;
}

#[tokio::test]
async fn node_identity_is_queryable() {
    let node = start_node("edge-7", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    match client.call(&P2mRequest::NodeInfo).await {
        P2mResponse::NodeInfo { node } => assert_eq!(node, "edge-7"),
        other => panic!("expected node info, got {other:?}"),
    }
    node.shutdown().await;
}

#[tokio::test]
async fn malformed_ids_are_named_as_such() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;

    let response = client
        .call(&P2mRequest::Enroll {
            id: "not-a-resource".into(),
            flags: ComplianceFlags::NONE,
        })
        .await;
    expect_error(response, ErrorCode::MalformedId);

    let response = client
        .call(&P2mRequest::IoRequest {
            source: proc_id("n1", 1).canonical(),
            destination: "file://".into(),
        })
        .await;
    expect_error(response, ErrorCode::MalformedId);

    node.shutdown().await;
}

#[tokio::test]
async fn invalid_flow_shapes_are_rejected() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    let p1 = proc_id("n1", 1);
    let p2 = proc_id("n1", 2);
    let f1 = file_id("n1", "/a");
    let f2 = file_id("n1", "/b");

    // Same id on both ends.
    expect_error(client.io_request(&p1, &p1).await, ErrorCode::BadFlow);
    // Two processes.
    expect_error(client.io_request(&p1, &p2).await, ErrorCode::BadFlow);
    // No process at all.
    expect_error(client.io_request(&f1, &f2).await, ErrorCode::BadFlow);

    node.shutdown().await;
}

#[tokio::test]
async fn unknown_resources_and_grants_are_distinct_errors() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;

    let response = client
        .call(&P2mRequest::ProvenanceQuery {
            id: file_id("n1", "/never/seen").canonical(),
        })
        .await;
    expect_error(response, ErrorCode::UnknownResource);

    let response = client
        .call(&P2mRequest::SetPolicy {
            id: file_id("n1", "/never/seen").canonical(),
            flags: ComplianceFlags::integral(),
        })
        .await;
    expect_error(response, ErrorCode::UnknownResource);

    let response = client
        .call(&P2mRequest::IoReport {
            grant_id: "n1/12345".into(),
            outcome: FlowOutcome::Success,
        })
        .await;
    expect_error(response, ErrorCode::StaleGrant);

    // A token that never parses as a grant id gets the same treatment as
    // one that expired.
    let response = client
        .call(&P2mRequest::IoReport {
            grant_id: "garbage".into(),
            outcome: FlowOutcome::Success,
        })
        .await;
    expect_error(response, ErrorCode::StaleGrant);

    node.shutdown().await;
}

#[tokio::test]
async fn garbage_frames_do_not_kill_the_connection() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;

    client.send_raw(b"this is not json").await;
    expect_error(client.read_response().await, ErrorCode::Internal);

    client.send_raw(b"{\"type\":\"no_such_request\"}").await;
    expect_error(client.read_response().await, ErrorCode::Internal);

    // Same connection still serves real traffic.
    match client.call(&P2mRequest::NodeInfo).await {
        P2mResponse::NodeInfo { node } => assert_eq!(node, "n1"),
        other => panic!("expected node info, got {other:?}"),
    }

    node.shutdown().await;
}

#[tokio::test]
async fn random_frames_always_get_an_answer() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    let mut rng = StdRng::seed_from_u64(0x5eed);

    for _ in 0..200 {
        let len = rng.random_range(0..256usize);
        let payload: Vec<u8> = (&mut rng).random_iter().take(len).collect();
        client.send_raw(&payload).await;
        // Every frame gets exactly one response; none of them may be a
        // successful decode of random bytes.
        match client.read_response().await {
            P2mResponse::Error(_) => {}
            other => panic!("random bytes decoded to {other:?}"),
        }
    }

    match client.call(&P2mRequest::NodeInfo).await {
        P2mResponse::NodeInfo { node } => assert_eq!(node, "n1"),
        other => panic!("expected node info, got {other:?}"),
    }

    node.shutdown().await;
}

#[tokio::test]
async fn oversized_frames_close_the_connection() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;

    use tokio::io::AsyncWriteExt;
    let huge = (64 * 1024 * 1024u32).to_be_bytes();
    client.stream_mut().write_all(&huge).await.unwrap();
    client.stream_mut().write_all(&[0u8; 1024]).await.unwrap();

    // The server drops the connection rather than buffering 64MiB. Either
    // a clean close or a reset proves it; the reset happens when our
    // unread padding is still in flight.
    use tokio::io::AsyncReadExt;
    let mut buf = [0u8; 16];
    let read = tokio::time::timeout(
        Duration::from_secs(2),
        client.stream_mut().read(&mut buf),
    )
    .await
    .expect("server left the connection open");
    match read {
        Ok(n) => assert_eq!(n, 0),
        Err(e) => assert_eq!(e.kind(), std::io::ErrorKind::ConnectionReset),
    }

    node.shutdown().await;
}

#[tokio::test]
async fn wire_activity_is_observable() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    let p = proc_id("n1", 1);
    let f = file_id("n1", "/data/f");

    client.enroll(&p, ComplianceFlags::NONE).await;
    client.io_request(&p, &f).await;

    let events = match client.call(&P2mRequest::WireLog).await {
        P2mResponse::WireLog { events } => events,
        other => panic!("expected wire log, got {other:?}"),
    };
    let labels: Vec<&str> = events.iter().map(|e| e.label.as_str()).collect();
    assert!(labels.contains(&"enroll"));
    assert!(labels.contains(&"io_request"));
    assert!(labels.contains(&"grant"));
    // The log query itself is not traffic worth recording.
    assert!(!labels.contains(&"wire_log"));
    let seqs: Vec<u64> = events.iter().map(|e| e.seq).collect();
    let mut sorted = seqs.clone();
    sorted.sort_unstable();
    assert_eq!(seqs, sorted);

    node.shutdown().await;
}

#[tokio::test]
async fn map_dump_renders_every_label() {
    let node = start_node("n1", Duration::from_secs(5)).await;
    let mut client = RawClient::connect(node.p2m_addr()).await;
    let p = proc_id("n1", 1);
    let f = file_id("n1", "/data/f");

    client.enroll(&p, ComplianceFlags::confidential()).await;
    client.enroll(&f, ComplianceFlags::NONE).await;

    let lines = match client.call(&P2mRequest::DumpMap).await {
        P2mResponse::MapDump { lines } => lines,
        other => panic!("expected map dump, got {other:?}"),
    };
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().any(|l| l.contains(&p.canonical()) && l.contains("conf=1")));

    node.shutdown().await;
}
