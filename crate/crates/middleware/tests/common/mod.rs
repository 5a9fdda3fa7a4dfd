#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use tokio::net::TcpStream;

use flowtrace_core::proto::{self, P2mRequest, P2mResponse};
use flowtrace_core::{ComplianceFlags, NodeId, ResourceId};
use flowtrace_middleware::{Middleware, MiddlewareConfig};

pub fn nid(name: &str) -> NodeId {
    NodeId::new(name).unwrap()
}

pub fn proc_id(node: &str, pid: u32) -> ResourceId {
    ResourceId::process(nid(node), pid, 7)
}

pub fn file_id(node: &str, path: &str) -> ResourceId {
    ResourceId::file(nid(node), path).unwrap()
}

pub fn sock(addr: &str) -> SocketAddr {
    addr.parse().unwrap()
}

pub fn stream_id(node: &str, local: &str, peer: &str) -> ResourceId {
    ResourceId::stream(nid(node), sock(local), sock(peer))
}

pub async fn start_node(name: &str, timeout: Duration) -> Middleware {
    let mut config = MiddlewareConfig::new(nid(name));
    config.p2m_addr = sock("127.0.0.1:0");
    config.m2m_addr = sock("127.0.0.1:0");
    config.reservation_timeout = timeout;
    Middleware::start(config).await.unwrap()
}

/// Minimal client speaking raw frames, for exercising the wire protocol
/// without going through any engine handle.
pub struct RawClient {
    stream: TcpStream,
}

impl RawClient {
    pub async fn connect(addr: SocketAddr) -> Self {
        Self {
            stream: TcpStream::connect(addr).await.unwrap(),
        }
    }

    pub fn stream_mut(&mut self) -> &mut TcpStream {
        &mut self.stream
    }

    pub async fn call(&mut self, request: &P2mRequest) -> P2mResponse {
        proto::write_frame_async(&mut self.stream, request)
            .await
            .unwrap();
        proto::read_frame_async(&mut self.stream).await.unwrap()
    }

    pub async fn send_raw(&mut self, payload: &[u8]) {
        use tokio::io::AsyncWriteExt;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(payload);
        self.stream.write_all(&frame).await.unwrap();
    }

    pub async fn read_response(&mut self) -> P2mResponse {
        proto::read_frame_async(&mut self.stream).await.unwrap()
    }

    pub async fn enroll(&mut self, id: &ResourceId, flags: ComplianceFlags) -> P2mResponse {
        self.call(&P2mRequest::Enroll {
            id: id.canonical(),
            flags,
        })
        .await
    }

    pub async fn io_request(&mut self, source: &ResourceId, destination: &ResourceId) -> P2mResponse {
        self.call(&P2mRequest::IoRequest {
            source: source.canonical(),
            destination: destination.canonical(),
        })
        .await
    }
}
