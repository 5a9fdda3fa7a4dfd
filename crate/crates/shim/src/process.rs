//! Identity of the calling process.

use std::sync::OnceLock;
use std::time::{SystemTime, UNIX_EPOCH};

use flowtrace_core::{NodeId, ResourceId};

/// The process id for this process on the given node. The (pid, start
/// time) pair is computed once; pid reuse across reboots is disambiguated
/// by the start time.
pub fn current_process_id(node: &NodeId) -> ResourceId {
    static IDENTITY: OnceLock<(u32, u64)> = OnceLock::new();
    let (pid, start) = *IDENTITY.get_or_init(|| (std::process::id(), start_time()));
    ResourceId::process(node.clone(), pid, start)
}

fn start_time() -> u64 {
    std::fs::read_to_string("/proc/self/stat")
        .ok()
        .and_then(|stat| parse_stat_start_time(&stat))
        .unwrap_or_else(|| {
            // No procfs: the wall-clock second of first use still breaks
            // pid-reuse ties well enough.
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

/// Field 22 of the stat line, counted after the parenthesized command name
/// because the name itself may contain spaces and parentheses.
fn parse_stat_start_time(stat: &str) -> Option<u64> {
    let after_comm = &stat[stat.rfind(')')? + 1..];
    after_comm.split_whitespace().nth(19)?.parse().ok()
}
