//! Traced TCP streams and listeners.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};

use flowtrace_core::{ComplianceFlags, ResourceId};

use crate::client::{MiddlewareClient, PhaseTimings};

#[derive(Debug)]
struct TraceIds {
    resource: ResourceId,
    process: ResourceId,
}

/// A TCP stream whose reads and writes run through the local daemon. The
/// stream's identity is its real socket pair, so the daemon on the far
/// node derives the mirrored identity independently.
#[derive(Debug)]
pub struct TracedStream {
    stream: TcpStream,
    client: MiddlewareClient,
    trace: Option<TraceIds>,
}

impl TracedStream {
    pub fn connect(client: &MiddlewareClient, addr: impl ToSocketAddrs) -> io::Result<TracedStream> {
        let node_known = match client.node() {
            Ok(_) => true,
            Err(_) if client.fail_open() => false,
            Err(e) => return Err(e),
        };
        let stream = TcpStream::connect(addr)?;
        Self::wrap(client, stream, node_known)
    }

    fn wrap(
        client: &MiddlewareClient,
        stream: TcpStream,
        node_known: bool,
    ) -> io::Result<TracedStream> {
        let trace = if node_known {
            let node = client.node()?;
            let resource = ResourceId::stream(node, stream.local_addr()?, stream.peer_addr()?);
            client.enroll(&resource, ComplianceFlags::NONE)?;
            Some(TraceIds {
                resource,
                process: client.process_id()?,
            })
        } else {
            None
        };
        Ok(TracedStream {
            stream,
            client: client.clone(),
            trace,
        })
    }

    pub fn id(&self) -> Option<&ResourceId> {
        self.trace.as_ref().map(|t| &t.resource)
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.stream.local_addr()
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.stream.peer_addr()
    }

    pub fn shutdown(&self, how: Shutdown) -> io::Result<()> {
        self.stream.shutdown(how)
    }

    pub fn read_timed(&mut self, buf: &mut [u8]) -> io::Result<(usize, PhaseTimings)> {
        let Some(trace) = &self.trace else {
            let n = self.stream.read(buf)?;
            return Ok((n, PhaseTimings::default()));
        };
        let stream = &mut self.stream;
        let (result, timings) = self
            .client
            .mediate(&trace.resource, &trace.process, || stream.read(buf));
        result.map(|n| (n, timings))
    }

    pub fn write_timed(&mut self, buf: &[u8]) -> io::Result<(usize, PhaseTimings)> {
        let Some(trace) = &self.trace else {
            let n = self.stream.write(buf)?;
            return Ok((n, PhaseTimings::default()));
        };
        let stream = &mut self.stream;
        let (result, timings) = self
            .client
            .mediate(&trace.process, &trace.resource, || stream.write(buf));
        result.map(|n| (n, timings))
    }
}

impl Read for TracedStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.read_timed(buf).map(|(n, _)| n)
    }
}

impl Write for TracedStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.write_timed(buf).map(|(n, _)| n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.stream.flush()
    }
}

/// Accepting side of traced TCP. The listener itself is not a traced
/// resource; each accepted connection is.
#[derive(Debug)]
pub struct TracedListener {
    listener: TcpListener,
    client: MiddlewareClient,
}

impl TracedListener {
    pub fn bind(client: &MiddlewareClient, addr: impl ToSocketAddrs) -> io::Result<TracedListener> {
        Ok(TracedListener {
            listener: TcpListener::bind(addr)?,
            client: client.clone(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn accept(&self) -> io::Result<(TracedStream, SocketAddr)> {
        let (stream, peer) = self.listener.accept()?;
        let node_known = match self.client.node() {
            Ok(_) => true,
            Err(_) if self.client.fail_open() => false,
            Err(e) => return Err(e),
        };
        let stream = TracedStream::wrap(&self.client, stream, node_known)?;
        Ok((stream, peer))
    }
}
