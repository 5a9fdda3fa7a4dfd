//! Process-facing request handling.
//!
//! Each mediated process keeps a connection here and speaks the framed
//! request/response protocol. Requests are handled strictly in order per
//! connection; a malformed frame gets an error response rather than a
//! closed socket so a confused client can recover.

use tokio::net::{TcpListener, TcpStream};

use flowtrace_core::proto::{
    self, Channel, Direction, ErrorCode, GrantMsg, P2mRequest, P2mResponse, ProtocolError,
    ProvenanceEntry,
};
use flowtrace_core::{Flow, GrantId, ResourceId};

use crate::engine::{Engine, EngineError, FlowDecision};

pub async fn serve(listener: TcpListener, engine: Engine) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(handle_connection(stream, engine.clone()));
            }
            Err(e) => {
                tracing::warn!("p2m accept failed: {e}");
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
                    tracing::debug!("p2m connection dropped: {e}");
                }
                return;
            }
        };
        // The log itself is meta-traffic; recording reads of it would make
        // every snapshot grow the next one.
        let mut meta = false;
        let response = match proto::decode::<P2mRequest>(&bytes) {
            Err(e) => {
                engine
                    .wirelog()
                    .record(Channel::P2m, Direction::In, "malformed", e.to_string());
                P2mResponse::Error(ProtocolError {
                    code: ErrorCode::Internal,
                    message: format!("malformed request: {e}"),
                })
            }
            Ok(request) => {
                meta = matches!(request, P2mRequest::WireLog);
                if !meta {
                    let (label, detail) = describe_request(&request);
                    engine
                        .wirelog()
                        .record(Channel::P2m, Direction::In, label, detail);
                }
                dispatch(request, &engine).await
            }
        };
        if !meta {
            let (label, detail) = describe_response(&response);
            engine
                .wirelog()
                .record(Channel::P2m, Direction::Out, label, detail);
        }
        if proto::write_frame_async(&mut stream, &response).await.is_err() {
            return;
        }
    }
}

fn describe_request(request: &P2mRequest) -> (&'static str, String) {
    match request {
        P2mRequest::Enroll { id, flags } => ("enroll", format!("{id} [{flags}]")),
        P2mRequest::IoRequest {
            source,
            destination,
        } => ("io_request", format!("{source} -> {destination}")),
        P2mRequest::IoReport { grant_id, outcome } => {
            ("io_report", format!("{grant_id} {outcome:?}"))
        }
        P2mRequest::SetPolicy { id, flags } => ("set_policy", format!("{id} [{flags}]")),
        P2mRequest::ProvenanceQuery { id } => ("provenance_query", id.clone()),
        P2mRequest::NodeInfo => ("node_info", String::new()),
        P2mRequest::DumpMap => ("dump_map", String::new()),
        P2mRequest::WireLog => ("wire_log", String::new()),
    }
}

fn describe_response(response: &P2mResponse) -> (&'static str, String) {
    match response {
        P2mResponse::Ack => ("ack", String::new()),
        P2mResponse::Grant(GrantMsg::Granted { grant_id }) => {
            ("grant", format!("granted {grant_id}"))
        }
        P2mResponse::Grant(GrantMsg::Denied { policy }) => ("grant", format!("denied {policy}")),
        P2mResponse::Grant(GrantMsg::TimedOut) => ("grant", "timed_out".to_string()),
        P2mResponse::Provenance { entries } => {
            ("provenance", format!("{} entries", entries.len()))
        }
        P2mResponse::NodeInfo { node } => ("node_info", node.clone()),
        P2mResponse::MapDump { lines } => ("map_dump", format!("{} labels", lines.len())),
        P2mResponse::WireLog { events } => ("wire_log", format!("{} events", events.len())),
        P2mResponse::Error(e) => ("error", format!("{} {}", e.code, e.message)),
    }
}

async fn dispatch(request: P2mRequest, engine: &Engine) -> P2mResponse {
    match request {
        P2mRequest::Enroll { id, flags } => {
            let id = match parse_id(&id) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            match engine.enroll(id, flags).await {
                Ok(()) => P2mResponse::Ack,
                Err(e) => engine_error(e),
            }
        }
        P2mRequest::IoRequest {
            source,
            destination,
        } => {
            let source = match parse_id(&source) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            let destination = match parse_id(&destination) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            let flow = match Flow::new(source, destination) {
                Ok(flow) => flow,
                Err(e) => {
                    return P2mResponse::Error(ProtocolError {
                        code: ErrorCode::BadFlow,
                        message: e.to_string(),
                    })
                }
            };
            match engine.request_flow(flow).await {
                Ok(FlowDecision::Granted(grant)) => P2mResponse::Grant(GrantMsg::Granted {
                    grant_id: grant.grant_id.to_string(),
                }),
                Ok(FlowDecision::Denied { policy }) => {
                    P2mResponse::Grant(GrantMsg::Denied { policy })
                }
                Ok(FlowDecision::TimedOut) => P2mResponse::Grant(GrantMsg::TimedOut),
                Err(e) => engine_error(e),
            }
        }
        P2mRequest::IoReport { grant_id, outcome } => {
            let grant_id = match GrantId::parse(&grant_id) {
                Ok(id) => id,
                // A token we never issued is indistinguishable from one
                // that already expired.
                Err(_) => {
                    return P2mResponse::Error(ProtocolError {
                        code: ErrorCode::StaleGrant,
                        message: format!("unknown grant: {grant_id}"),
                    })
                }
            };
            match engine.report_flow(grant_id, outcome).await {
                Ok(()) => P2mResponse::Ack,
                Err(e) => engine_error(e),
            }
        }
        P2mRequest::SetPolicy { id, flags } => {
            let id = match parse_id(&id) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            match engine.set_policy(id, flags).await {
                Ok(()) => P2mResponse::Ack,
                Err(e) => engine_error(e),
            }
        }
        P2mRequest::ProvenanceQuery { id } => {
            let id = match parse_id(&id) {
                Ok(id) => id,
                Err(resp) => return resp,
            };
            match engine.get_provenance(id).await {
                Ok(summaries) => P2mResponse::Provenance {
                    entries: summaries
                        .into_iter()
                        .map(|s| ProvenanceEntry {
                            id: s.id.canonical(),
                            flags: s.flags,
                        })
                        .collect(),
                },
                Err(e) => engine_error(e),
            }
        }
        P2mRequest::NodeInfo => P2mResponse::NodeInfo {
            node: engine.node().to_string(),
        },
        P2mRequest::DumpMap => match engine.dump().await {
            Ok(lines) => P2mResponse::MapDump { lines },
            Err(e) => engine_error(e),
        },
        P2mRequest::WireLog => P2mResponse::WireLog {
            events: engine.wirelog().snapshot(),
        },
    }
}

fn parse_id(text: &str) -> Result<ResourceId, P2mResponse> {
    ResourceId::parse(text).map_err(|e| {
        P2mResponse::Error(ProtocolError {
            code: ErrorCode::MalformedId,
            message: e.to_string(),
        })
    })
}

fn engine_error(e: EngineError) -> P2mResponse {
    let code = match &e {
        EngineError::UnknownResource(_) => ErrorCode::UnknownResource,
        EngineError::StaleGrant(_) | EngineError::StaleSync(_) => ErrorCode::StaleGrant,
        EngineError::PeerUnreachable(_)
        | EngineError::Timeout
        | EngineError::Invalid(_)
        | EngineError::Closed => ErrorCode::Internal,
    };
    P2mResponse::Error(ProtocolError {
        code,
        message: e.to_string(),
    })
}
