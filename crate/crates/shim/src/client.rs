//! Blocking client for the daemon's process-facing socket.
//!
//! One connection per client, shared by every traced handle created from
//! it and serialized by a mutex; the protocol is strict request/response,
//! so interleaving is never an issue. A broken connection is re-dialed
//! once per call before the failure escalates to the configured fail mode.

use std::io::{self, ErrorKind};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use flowtrace_core::proto::{
    self, ErrorCode, GrantMsg, P2mRequest, P2mResponse, ProvenanceEntry,
};
use flowtrace_core::{ComplianceFlags, FlowOutcome, NodeId, ResourceId};

use crate::config::{FailMode, ShimConfig};
use crate::process::current_process_id;

/// Wall-clock cost of each mediation phase of one traced call.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTimings {
    /// Authorization round trip, up to the grant decision.
    pub auth: Duration,
    /// The real standard-library operation.
    pub exec: Duration,
    /// Outcome report round trip, including the daemon's label update.
    pub report: Duration,
}

#[derive(Debug)]
struct Conn {
    stream: TcpStream,
    node: NodeId,
}

#[derive(Debug)]
struct Inner {
    conn: Option<Conn>,
}

/// Handle to one node's daemon. Cloning shares the connection.
#[derive(Debug, Clone)]
pub struct MiddlewareClient {
    inner: Arc<Mutex<Inner>>,
    config: Arc<ShimConfig>,
}

impl MiddlewareClient {
    pub fn new(config: ShimConfig) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner { conn: None })),
            config: Arc::new(config),
        }
    }

    /// A client configured from `FLOWTRACE_*` environment variables.
    /// Construction never touches the network; the connection is dialed on
    /// first use.
    pub fn from_env() -> Self {
        Self::new(ShimConfig::from_env())
    }

    pub fn config(&self) -> &ShimConfig {
        &self.config
    }

    pub fn fail_open(&self) -> bool {
        self.config.fail_mode == FailMode::Open
    }

    fn dial(&self) -> io::Result<Conn> {
        let stream = TcpStream::connect_timeout(&self.config.p2m_addr, self.config.timeout)
            .map_err(|e| {
                io::Error::new(
                    e.kind(),
                    format!("middleware unreachable at {}: {e}", self.config.p2m_addr),
                )
            })?;
        stream.set_read_timeout(Some(self.config.timeout))?;
        stream.set_write_timeout(Some(self.config.timeout))?;
        let mut conn = Conn {
            stream,
            node: NodeId::new("unknown").unwrap(),
        };
        // Learn whose daemon this is; every local id is built around that
        // name, including our own process identity.
        let node = match exchange(&mut conn.stream, &P2mRequest::NodeInfo)? {
            P2mResponse::NodeInfo { node } => NodeId::new(&node)
                .map_err(|e| io::Error::new(ErrorKind::InvalidData, e.to_string()))?,
            other => return Err(unexpected(&other)),
        };
        conn.node = node;
        let enroll = P2mRequest::Enroll {
            id: current_process_id(&conn.node).canonical(),
            flags: ComplianceFlags::NONE,
        };
        match exchange(&mut conn.stream, &enroll)? {
            P2mResponse::Ack => Ok(conn),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    /// Runs one request/response pair, re-dialing once if the connection
    /// was dead.
    fn call(&self, request: &P2mRequest) -> io::Result<P2mResponse> {
        let mut inner = self.inner.lock().unwrap();
        if inner.conn.is_none() {
            inner.conn = Some(self.dial()?);
        }
        let conn = inner.conn.as_mut().unwrap();
        match exchange(&mut conn.stream, request) {
            Ok(response) => Ok(response),
            Err(_) => {
                inner.conn = None;
                let mut fresh = self.dial()?;
                let response = exchange(&mut fresh.stream, request);
                if response.is_ok() {
                    inner.conn = Some(fresh);
                } else {
                    inner.conn = None;
                }
                response
            }
        }
    }

    /// The node identity of the connected daemon.
    pub fn node(&self) -> io::Result<NodeId> {
        let mut inner = self.inner.lock().unwrap();
        if inner.conn.is_none() {
            inner.conn = Some(self.dial()?);
        }
        Ok(inner.conn.as_ref().unwrap().node.clone())
    }

    /// This process's resource id as seen by the connected daemon.
    pub fn process_id(&self) -> io::Result<ResourceId> {
        Ok(current_process_id(&self.node()?))
    }

    pub fn enroll(&self, id: &ResourceId, flags: ComplianceFlags) -> io::Result<()> {
        match self.call(&P2mRequest::Enroll {
            id: id.canonical(),
            flags,
        })? {
            P2mResponse::Ack => Ok(()),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    pub fn set_policy(&self, id: &ResourceId, flags: ComplianceFlags) -> io::Result<()> {
        match self.call(&P2mRequest::SetPolicy {
            id: id.canonical(),
            flags,
        })? {
            P2mResponse::Ack => Ok(()),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    pub fn provenance(&self, id: &ResourceId) -> io::Result<Vec<ProvenanceEntry>> {
        match self.call(&P2mRequest::ProvenanceQuery { id: id.canonical() })? {
            P2mResponse::Provenance { entries } => Ok(entries),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    /// Ask for authorization of one flow without executing anything.
    ///
    /// Low-level access for drivers that manage the grant themselves;
    /// pair with [`report`](Self::report). `mediate` is the usual path.
    pub fn request_grant(
        &self,
        source: &ResourceId,
        destination: &ResourceId,
    ) -> io::Result<GrantMsg> {
        match self.call(&P2mRequest::IoRequest {
            source: source.canonical(),
            destination: destination.canonical(),
        })? {
            P2mResponse::Grant(grant) => Ok(grant),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    /// Settle a grant obtained from [`request_grant`](Self::request_grant).
    pub fn report(&self, grant_id: String, outcome: FlowOutcome) -> io::Result<()> {
        match self.call(&P2mRequest::IoReport { grant_id, outcome })? {
            P2mResponse::Ack => Ok(()),
            P2mResponse::Error(e) => Err(protocol_error(&e.code, &e.message)),
            other => Err(unexpected(&other)),
        }
    }

    /// The authorize/execute/report sequence around one real operation.
    ///
    /// `exec` runs only on a grant. Its outcome is reported either way,
    /// and the result returns to the caller only after the daemon acked
    /// the report, so a later query anywhere in the system already sees
    /// this flow. When the daemon is unreachable the configured fail mode
    /// decides: refuse the operation, or run it untracked.
    pub fn mediate<T>(
        &self,
        source: &ResourceId,
        destination: &ResourceId,
        exec: impl FnOnce() -> io::Result<T>,
    ) -> (io::Result<T>, PhaseTimings) {
        let mut timings = PhaseTimings::default();
        let started = Instant::now();
        let grant = match self.request_grant(source, destination) {
            Ok(grant) => grant,
            Err(e) if is_unreachable(&e) && self.fail_open() => {
                let exec_started = Instant::now();
                let result = exec();
                timings.exec = exec_started.elapsed();
                return (result, timings);
            }
            Err(e) => return (Err(e), timings),
        };
        timings.auth = started.elapsed();

        let grant_id = match grant {
            GrantMsg::Granted { grant_id } => grant_id,
            GrantMsg::Denied { policy } => {
                return (
                    Err(io::Error::new(
                        ErrorKind::PermissionDenied,
                        format!("flow denied by policy {policy}"),
                    )),
                    timings,
                )
            }
            GrantMsg::TimedOut => {
                return (
                    Err(io::Error::new(
                        ErrorKind::TimedOut,
                        "flow authorization timed out",
                    )),
                    timings,
                )
            }
        };

        let exec_started = Instant::now();
        let result = exec();
        timings.exec = exec_started.elapsed();

        let outcome = if result.is_ok() {
            FlowOutcome::Success
        } else {
            FlowOutcome::Failure
        };
        let report_started = Instant::now();
        let reported = self.report(grant_id, outcome);
        timings.report = report_started.elapsed();
        match reported {
            Ok(()) => (result, timings),
            // The bytes moved but the record did not land; surfacing the
            // report failure is the closed behavior. Open mode keeps the
            // caller's result.
            Err(_) if self.fail_open() => (result, timings),
            Err(e) => (Err(e), timings),
        }
    }
}

fn exchange(stream: &mut TcpStream, request: &P2mRequest) -> io::Result<P2mResponse> {
    proto::write_frame(stream, request)?;
    proto::read_frame(stream).map_err(|e| match e {
        proto::FrameError::Io(e) => e,
        other => io::Error::new(ErrorKind::InvalidData, other.to_string()),
    })
}

fn is_unreachable(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        ErrorKind::ConnectionRefused
            | ErrorKind::ConnectionReset
            | ErrorKind::ConnectionAborted
            | ErrorKind::NotConnected
            | ErrorKind::BrokenPipe
            | ErrorKind::TimedOut
            | ErrorKind::WouldBlock
            | ErrorKind::UnexpectedEof
            | ErrorKind::HostUnreachable
            | ErrorKind::NetworkUnreachable
    )
}

fn protocol_error(code: &ErrorCode, message: &str) -> io::Error {
    let kind = match code {
        ErrorCode::MalformedId | ErrorCode::BadFlow => ErrorKind::InvalidInput,
        ErrorCode::UnknownResource => ErrorKind::NotFound,
        ErrorCode::StaleGrant => ErrorKind::TimedOut,
        ErrorCode::PeerUnreachable | ErrorCode::Internal => ErrorKind::Other,
    };
    io::Error::new(kind, format!("{code}: {message}"))
}

fn unexpected(response: &P2mResponse) -> io::Error {
    io::Error::new(
        ErrorKind::InvalidData,
        format!("unexpected middleware response: {response:?}"),
    )
}
