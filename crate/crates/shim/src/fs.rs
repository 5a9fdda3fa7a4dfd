//! Traced file handles.

use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use flowtrace_core::{ComplianceFlags, ResourceId};

use crate::client::{MiddlewareClient, PhaseTimings};

#[derive(Debug)]
struct TraceIds {
    resource: ResourceId,
    process: ResourceId,
}

/// A file whose reads and writes run through the local daemon. Mirrors
/// `std::fs::File`: `open` for reading, `create` to create or truncate
/// for writing.
#[derive(Debug)]
pub struct TracedFile {
    file: File,
    client: MiddlewareClient,
    /// None when the daemon was unreachable and the fail mode let the
    /// handle degrade to plain I/O.
    trace: Option<TraceIds>,
}

impl TracedFile {
    pub fn open(client: &MiddlewareClient, path: impl AsRef<Path>) -> io::Result<TracedFile> {
        Self::new(client, path.as_ref(), |p| File::open(p))
    }

    pub fn create(client: &MiddlewareClient, path: impl AsRef<Path>) -> io::Result<TracedFile> {
        Self::new(client, path.as_ref(), |p| File::create(p))
    }

    fn new(
        client: &MiddlewareClient,
        path: &Path,
        open: impl FnOnce(&Path) -> io::Result<File>,
    ) -> io::Result<TracedFile> {
        // Reach the daemon before touching the filesystem: fail-closed
        // means a dead daemon refuses the open outright.
        let node = match client.node() {
            Ok(node) => Some(node),
            Err(_) if client.fail_open() => None,
            Err(e) => return Err(e),
        };
        let file = open(path)?;
        let trace = match node {
            None => None,
            Some(node) => {
                // The file exists by now, so the id is built from the
                // real absolute path however the caller spelled it.
                let canonical = std::fs::canonicalize(path)?;
                let resource = ResourceId::file(node.clone(), canonical.to_string_lossy())
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
                client.enroll(&resource, ComplianceFlags::NONE)?;
                Some(TraceIds {
                    resource,
                    process: client.process_id()?,
                })
            }
        };
        Ok(TracedFile {
            file,
            client: client.clone(),
            trace,
        })
    }

    /// The file's resource id, unless the handle degraded to plain I/O.
    pub fn id(&self) -> Option<&ResourceId> {
        self.trace.as_ref().map(|t| &t.resource)
    }

    /// As `Read::read`, also reporting what each mediation phase cost.
    pub fn read_timed(&mut self, buf: &mut [u8]) -> io::Result<(usize, PhaseTimings)> {
        let Some(trace) = &self.trace else {
            let n = self.file.read(buf)?;
            return Ok((n, PhaseTimings::default()));
        };
        let file = &mut self.file;
        let (result, timings) = self
            .client
            .mediate(&trace.resource, &trace.process, || file.read(buf));
        result.map(|n| (n, timings))
    }

    /// As `Write::write`, also reporting what each mediation phase cost.
    pub fn write_timed(&mut self, buf: &[u8]) -> io::Result<(usize, PhaseTimings)> {
        let Some(trace) = &self.trace else {
            let n = self.file.write(buf)?;
            return Ok((n, PhaseTimings::default()));
        };
        let file = &mut self.file;
        let (result, timings) = self
            .client
            .mediate(&trace.process, &trace.resource, || file.write(buf));
        result.map(|n| (n, timings))
    }
}

impl Read for TracedFile {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.read_timed(buf).map(|(n, _)| n)
    }
}

impl Write for TracedFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.write_timed(buf).map(|(n, _)| n)
    }

    // Flushing moves no data between resources; it goes straight down.
    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()
    }
}

// Seeking only repositions the cursor; like flush it is not a flow.
impl Seek for TracedFile {
    fn seek(&mut self, pos: SeekFrom) -> io::Result<u64> {
        self.file.seek(pos)
    }
}
