//! Daemon assembly: one engine plus its two listeners.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use flowtrace_core::proto::{DEFAULT_M2M_PORT, DEFAULT_P2M_PORT};
use flowtrace_core::NodeId;

use crate::engine::{Engine, EngineConfig, PeerSpec, DEFAULT_RESERVATION_TIMEOUT};
use crate::wirelog::WireLog;
use crate::{m2m, p2m};

pub struct MiddlewareConfig {
    pub node: NodeId,
    pub p2m_addr: SocketAddr,
    pub m2m_addr: SocketAddr,
    pub reservation_timeout: Duration,
    pub peers: Vec<PeerSpec>,
}

impl MiddlewareConfig {
    pub fn new(node: NodeId) -> Self {
        Self {
            node,
            p2m_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_P2M_PORT)),
            m2m_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_M2M_PORT)),
            reservation_timeout: DEFAULT_RESERVATION_TIMEOUT,
            peers: Vec::new(),
        }
    }
}

/// A running node: both listeners bound and serving. Port 0 in the config
/// is fine; the accessors report the addresses actually bound.
pub struct Middleware {
    engine: Engine,
    p2m_addr: SocketAddr,
    m2m_addr: SocketAddr,
    p2m_task: JoinHandle<()>,
    m2m_task: JoinHandle<()>,
}

impl Middleware {
    pub async fn start(config: MiddlewareConfig) -> std::io::Result<Self> {
        let p2m_listener = TcpListener::bind(config.p2m_addr).await?;
        let m2m_listener = TcpListener::bind(config.m2m_addr).await?;
        let p2m_addr = p2m_listener.local_addr()?;
        let m2m_addr = m2m_listener.local_addr()?;

        let mut engine_config = EngineConfig::new(config.node);
        engine_config.reservation_timeout = config.reservation_timeout;
        engine_config.peers = config.peers;
        engine_config.m2m_endpoint = Some(m2m_addr);
        let engine = Engine::start(engine_config);

        let p2m_task = tokio::spawn(p2m::serve(p2m_listener, engine.clone()));
        let m2m_task = tokio::spawn(m2m::serve(m2m_listener, engine.clone()));

        Ok(Self {
            engine,
            p2m_addr,
            m2m_addr,
            p2m_task,
            m2m_task,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn node(&self) -> &NodeId {
        self.engine.node()
    }

    pub fn p2m_addr(&self) -> SocketAddr {
        self.p2m_addr
    }

    pub fn m2m_addr(&self) -> SocketAddr {
        self.m2m_addr
    }

    pub fn wirelog(&self) -> &Arc<WireLog> {
        self.engine.wirelog()
    }

    pub async fn shutdown(self) {
        self.p2m_task.abort();
        self.m2m_task.abort();
        self.engine.shutdown().await;
    }
}
