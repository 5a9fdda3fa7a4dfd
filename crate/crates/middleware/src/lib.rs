//! Per-node traceability middleware.
//!
//! One instance runs next to the processes of a single node. It owns the
//! id-to-label map, mediates every declared I/O flow through a
//! reserve/check/grant/report cycle, evaluates policy before any byte moves,
//! and coordinates with peer instances over M2M when a flow crosses nodes.

pub mod compliance;
pub mod engine;
pub mod m2m;
pub mod middleware;
pub mod p2m;
pub mod wirelog;

pub use compliance::{Chain, ChainError, Enforcer, FlowContext, FnEnforcer, Verdict};
pub use engine::{Engine, EngineConfig, EngineError, EngineStats, FlowDecision, PeerSpec, SettledFlow};
pub use middleware::{Middleware, MiddlewareConfig};
pub use wirelog::WireLog;
