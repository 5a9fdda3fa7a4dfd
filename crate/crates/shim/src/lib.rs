//! Traced standard I/O.
//!
//! Drop-in file and TCP types whose byte-moving calls run the local
//! traceability daemon's authorize/execute/report sequence around the real
//! operation. The surface mirrors `std::fs` and `std::net` closely enough
//! that adopting it is an import swap; everything else (provenance,
//! policy, cross-node coordination) happens behind the daemon's socket.
//!
//! ```no_run
//! use flowtrace_shim as tfs;
//!
//! let client = tfs::MiddlewareClient::from_env();
//! let mut out = tfs::TracedFile::create(&client, "/tmp/report.txt")?;
//! std::io::Write::write_all(&mut out, b"hello")?;
//! # std::io::Result::Ok(())
//! ```

mod client;
mod config;
mod fs;
mod net;
mod process;

pub use client::{MiddlewareClient, PhaseTimings};
pub use config::{FailMode, ShimConfig};
pub use fs::TracedFile;
pub use net::{TracedListener, TracedStream};
