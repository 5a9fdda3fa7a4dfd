//! Shim configuration, read from the environment so applications need no
//! code changes to point at their node's daemon.

use std::net::SocketAddr;
use std::time::Duration;

use flowtrace_core::proto::DEFAULT_P2M_PORT;

/// What a traced operation does when the daemon cannot be reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailMode {
    /// Refuse the operation (default): no bytes move untracked.
    #[default]
    Closed,
    /// Fall back to the plain standard-library behavior.
    Open,
}

#[derive(Debug, Clone)]
pub struct ShimConfig {
    pub p2m_addr: SocketAddr,
    pub fail_mode: FailMode,
    /// Per-call socket timeout. Must comfortably exceed the daemon's
    /// reservation timeout: a grant answer can legitimately take that long
    /// when the destination is contended.
    pub timeout: Duration,
}

impl Default for ShimConfig {
    fn default() -> Self {
        Self {
            p2m_addr: SocketAddr::from(([127, 0, 0, 1], DEFAULT_P2M_PORT)),
            fail_mode: FailMode::Closed,
            timeout: Duration::from_millis(7000),
        }
    }
}

impl ShimConfig {
    pub fn new(p2m_addr: SocketAddr) -> Self {
        Self {
            p2m_addr,
            ..Self::default()
        }
    }

    /// Reads `FLOWTRACE_P2M_ADDR`, `FLOWTRACE_FAIL_MODE` (`closed` |
    /// `open`), and `FLOWTRACE_TIMEOUT_MS`. Unset or unparseable values
    /// fall back to the defaults; fail mode in particular never silently
    /// becomes `Open`.
    pub fn from_env() -> Self {
        Self::from_lookup(|key| std::env::var(key).ok())
    }

    fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Self {
        let mut config = Self::default();
        if let Some(addr) = lookup("FLOWTRACE_P2M_ADDR") {
            if let Ok(addr) = addr.parse() {
                config.p2m_addr = addr;
            }
        }
        if let Some(mode) = lookup("FLOWTRACE_FAIL_MODE") {
            if mode.eq_ignore_ascii_case("open") {
                config.fail_mode = FailMode::Open;
            }
        }
        if let Some(ms) = lookup("FLOWTRACE_TIMEOUT_MS") {
            if let Ok(ms) = ms.parse() {
                config.timeout = Duration::from_millis(ms);
            }
        }
        config
    }
}
