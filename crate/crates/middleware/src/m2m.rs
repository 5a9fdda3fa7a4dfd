//! Middleware-to-middleware coordination.
//!
//! Inbound: Reserve holds the local side of a stream exclusively on behalf
//! of the sending node; SyncProvenance delivers the resulting update and
//! releases the hold. Outbound: a connect-per-call client used by the
//! engine when a flow's destination stream terminates on another node.

use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::{TcpListener, TcpStream};
use tokio::time::{timeout_at, Instant};

use flowtrace_core::proto::{
    self, Channel, Direction, ErrorCode, M2mRequest, M2mResponse, ProtocolError, ProvenanceEntry,
};
use flowtrace_core::{LabelSummary, NodeId, ResourceId};

use crate::engine::{Engine, EngineError};
use crate::wirelog::WireLog;

pub async fn serve(listener: TcpListener, engine: Engine) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(handle_connection(stream, engine.clone()));
            }
            Err(e) => {
                tracing::warn!("m2m accept failed: {e}");
                tokio::time::sleep(std::time::Duration::from_millis(50)).await;
            }
        }
    }
}

async fn handle_connection(mut stream: TcpStream, engine: Engine) {
    loop {
        let bytes = match proto::read_frame_bytes_async(&mut stream).await {
            Ok(bytes) => bytes,
            Err(e) => {
                if !e.is_clean_eof() {
                    tracing::debug!("m2m connection dropped: {e}");
                }
                return;
            }
        };
        let wirelog = engine.wirelog().clone();
        let response = match proto::decode::<M2mRequest>(&bytes) {
            Err(e) => {
                wirelog.record(Channel::M2m, Direction::In, "malformed", e.to_string());
                M2mResponse::Error(ProtocolError {
                    code: ErrorCode::Internal,
                    message: format!("malformed request: {e}"),
                })
            }
            Ok(request) => {
                let (label, detail) = describe_request(&request);
                wirelog.record(Channel::M2m, Direction::In, label, detail);
                dispatch(request, &engine).await
            }
        };
        let (label, detail) = describe_response(&response);
        wirelog.record(Channel::M2m, Direction::Out, label, detail);
        if proto::write_frame_async(&mut stream, &response).await.is_err() {
            return;
        }
    }
}

fn describe_request(request: &M2mRequest) -> (&'static str, String) {
    match request {
        M2mRequest::Reserve { stream, from_node, .. } => {
            ("reserve", format!("{stream} from {from_node}"))
        }
        M2mRequest::SyncProvenance { stream, provenance } => {
            ("sync_provenance", format!("{stream} ({} entries)", provenance.len()))
        }
    }
}

fn describe_response(response: &M2mResponse) -> (&'static str, String) {
    match response {
        M2mResponse::Ack => ("ack", String::new()),
        M2mResponse::Error(e) => ("error", format!("{} {}", e.code, e.message)),
    }
}

async fn dispatch(request: M2mRequest, engine: &Engine) -> M2mResponse {
    match request {
        M2mRequest::Reserve {
            stream,
            from_node,
            from_endpoint,
        } => {
            let id = match parse_stream_id(&stream) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            let from = parse_sender(&from_node, &from_endpoint);
            match engine.reserve_remote(id, from).await {
                Ok(()) => M2mResponse::Ack,
                Err(e) => engine_error(e),
            }
        }
        M2mRequest::SyncProvenance { stream, provenance } => {
            let id = match parse_stream_id(&stream) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            let mut summaries = Vec::with_capacity(provenance.len());
            for entry in provenance {
                match ResourceId::parse(&entry.id) {
                    Ok(id) => summaries.push(LabelSummary {
                        id,
                        flags: entry.flags,
                    }),
                    Err(e) => {
                        return M2mResponse::Error(ProtocolError {
                            code: ErrorCode::MalformedId,
                            message: format!("provenance entry: {e}"),
                        })
                    }
                }
            }
            match engine.sync_remote(id, summaries).await {
                Ok(()) => M2mResponse::Ack,
                Err(e) => engine_error(e),
            }
        }
    }
}

fn parse_stream_id(text: &str) -> Result<ResourceId, M2mResponse> {
    match ResourceId::parse(text) {
        Ok(id) if id.is_stream() => Ok(id),
        Ok(_) => Err(M2mResponse::Error(ProtocolError {
            code: ErrorCode::MalformedId,
            message: format!("not a stream id: {text}"),
        })),
        Err(e) => Err(M2mResponse::Error(ProtocolError {
            code: ErrorCode::MalformedId,
            message: e.to_string(),
        })),
    }
}

/// The sender's self-identification: both fields must parse for the entry
/// to be learned; otherwise the reserve still proceeds without it.
fn parse_sender(node: &str, endpoint: &str) -> Option<(NodeId, SocketAddr)> {
    let node = NodeId::new(node).ok()?;
    let endpoint = endpoint.parse().ok()?;
    Some((node, endpoint))
}

fn engine_error(e: EngineError) -> M2mResponse {
    let code = match &e {
        EngineError::UnknownResource(_) => ErrorCode::UnknownResource,
        EngineError::StaleGrant(_) | EngineError::StaleSync(_) => ErrorCode::StaleGrant,
        EngineError::PeerUnreachable(_) => ErrorCode::PeerUnreachable,
        EngineError::Invalid(_) => ErrorCode::MalformedId,
        EngineError::Timeout | EngineError::Closed => ErrorCode::Internal,
    };
    M2mResponse::Error(ProtocolError {
        code,
        message: e.to_string(),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum M2mCallError {
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("peer rejected: {} {}", .0.code, .0.message)]
    Rejected(ProtocolError),
    #[error("peer call timed out")]
    Timeout,
}

/// Outbound half of the protocol. Connects per call; both calls carry a
/// deadline so a stalled peer can never outlive the caller's reservation
/// window.
pub struct M2mClient {
    wirelog: Arc<WireLog>,
}

impl M2mClient {
    pub fn new(wirelog: Arc<WireLog>) -> Self {
        Self { wirelog }
    }

    pub async fn reserve(
        &self,
        endpoint: SocketAddr,
        stream: &ResourceId,
        from_node: &NodeId,
        from_endpoint: Option<SocketAddr>,
        deadline: Instant,
    ) -> Result<(), M2mCallError> {
        let request = M2mRequest::Reserve {
            stream: stream.canonical(),
            from_node: from_node.to_string(),
            from_endpoint: from_endpoint.map(|a| a.to_string()).unwrap_or_default(),
        };
        self.call(endpoint, request, "reserve", stream.canonical(), deadline)
            .await
    }

    pub async fn sync(
        &self,
        endpoint: SocketAddr,
        stream: &ResourceId,
        summaries: Vec<LabelSummary>,
        deadline: Instant,
    ) -> Result<(), M2mCallError> {
        let provenance = summaries
            .into_iter()
            .map(|s| ProvenanceEntry {
                id: s.id.canonical(),
                flags: s.flags,
            })
            .collect();
        let request = M2mRequest::SyncProvenance {
            stream: stream.canonical(),
            provenance,
        };
        self.call(
            endpoint,
            request,
            "sync_provenance",
            stream.canonical(),
            deadline,
        )
        .await
    }

    async fn call(
        &self,
        endpoint: SocketAddr,
        request: M2mRequest,
        label: &str,
        detail: String,
        deadline: Instant,
    ) -> Result<(), M2mCallError> {
        self.wirelog
            .record(Channel::M2m, Direction::Out, label, detail.clone());
        let io = async {
            let mut stream = TcpStream::connect(endpoint)
                .await
                .map_err(|e| e.to_string())?;
            proto::write_frame_async(&mut stream, &request)
                .await
                .map_err(|e| e.to_string())?;
            proto::read_frame_async::<M2mResponse>(&mut stream)
                .await
                .map_err(|e| e.to_string())
        };
        let response = match timeout_at(deadline, io).await {
            Err(_) => {
                self.wirelog
                    .record(Channel::M2m, Direction::In, "timeout", detail);
                return Err(M2mCallError::Timeout);
            }
            Ok(Err(e)) => {
                self.wirelog
                    .record(Channel::M2m, Direction::In, "unreachable", detail);
                return Err(M2mCallError::Unreachable(e));
            }
            Ok(Ok(response)) => response,
        };
        let (label, _) = match &response {
            M2mResponse::Ack => ("ack", ()),
            M2mResponse::Error(_) => ("error", ()),
        };
        self.wirelog
            .record(Channel::M2m, Direction::In, label, detail);
        match response {
            M2mResponse::Ack => Ok(()),
            M2mResponse::Error(e) => Err(M2mCallError::Rejected(e)),
        }
    }
}
