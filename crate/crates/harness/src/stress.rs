//! Randomized concurrent flows checked against the sequential model.

use std::collections::BTreeSet;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use flowtrace_core::proto::GrantMsg;
use flowtrace_core::{ComplianceFlags, FlowOutcome, ResourceId};

use crate::cluster::Cluster;
use crate::oracle::OracleState;
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub workers: usize,
    pub ops_per_worker: usize,
    pub resources: usize,
    pub seed: u64,
    /// Whole-run budget. Blowing it counts as a liveness failure, not an
    /// infrastructure error: the system is supposed to guarantee progress.
    pub budget: Duration,
}

impl StressConfig {
    pub fn new(workers: usize, ops_per_worker: usize, resources: usize, seed: u64) -> Self {
        StressConfig {
            workers,
            ops_per_worker,
            resources,
            seed,
            budget: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct StressReport {
    pub granted: u64,
    pub denied: u64,
    pub timed_out: u64,
    pub failures_reported: u64,
    pub settled: u64,
    pub violations: u64,
    pub leftover_grants: usize,
    pub mismatches: Vec<String>,
    pub elapsed: Duration,
}

impl StressReport {
    /// True when every provenance set matched the model, the
    /// readers-writers instrumentation saw nothing, and everything the
    /// run started was settled or reclaimed.
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.leftover_grants == 0 && self.mismatches.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "granted {} / denied {} / timed out {} (failures reported {})\n\
             settled {} flows in {:.2?}; violations {}; leftover grants {}\n",
            self.granted,
            self.denied,
            self.timed_out,
            self.failures_reported,
            self.settled,
            self.elapsed,
            self.violations,
            self.leftover_grants,
        );
        if self.mismatches.is_empty() {
            out.push_str("model comparison: all provenance sets match\n");
        } else {
            for m in &self.mismatches {
                out.push_str(&format!("model mismatch: {m}\n"));
            }
        }
        out.push_str(if self.passed() {
            "result: pass\n"
        } else {
            "result: fail\n"
        });
        out
    }
}

#[derive(Default)]
struct WorkerTally {
    granted: u64,
    denied: u64,
    timed_out: u64,
    failures: u64,
}

/// Runs `workers` threads, each issuing `ops_per_worker` random flows
/// between its own process label and `resources` shared files, then
/// replays the node's settlement log through [`OracleState`] and
/// compares every label.
pub fn run_stress(config: &StressConfig) -> Result<StressReport, HarnessError> {
    if config.workers == 0 || config.ops_per_worker == 0 || config.resources == 0 {
        return Err(HarnessError::infra(
            "workers, ops, and resources must all be at least 1",
        ));
    }
    let started = Instant::now();
    let deadline = started + config.budget;
    let cluster = Cluster::start(&["stress"], Duration::from_secs(5))?;
    let node = cluster.node_id(0).clone();

    let files: Vec<ResourceId> = (0..config.resources)
        .map(|i| ResourceId::file(node.clone(), format!("/stress/f{i:02}")).unwrap())
        .collect();
    let processes: Vec<ResourceId> = (0..config.workers)
        .map(|w| ResourceId::process(node.clone(), 5000 + w as u32, 1))
        .collect();

    let setup = cluster.client(0);
    for id in files.iter().chain(processes.iter()) {
        setup
            .enroll(id, ComplianceFlags::NONE)
            .map_err(|e| HarnessError::Infra(format!("enrolling {id}: {e}")))?;
    }

    let (tx, rx) = mpsc::channel();
    for (w, process) in processes.iter().enumerate() {
        let tx = tx.clone();
        let client = cluster.client(0);
        let process = process.clone();
        let files = files.clone();
        let ops = config.ops_per_worker;
        let seed = config.seed.wrapping_add(w as u64).wrapping_mul(0x9E3779B97F4A7C15);
        std::thread::spawn(move || {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut tally = WorkerTally::default();
            for _ in 0..ops {
                if Instant::now() > deadline {
                    let _ = tx.send(Err("budget exhausted mid-run".to_string()));
                    return;
                }
                let file = &files[rng.random_range(0..files.len())];
                let write = rng.random_bool(0.5);
                let fail = rng.random_bool(0.1);
                let (src, dst) = if write {
                    (&process, file)
                } else {
                    (file, &process)
                };
                match client.request_grant(src, dst) {
                    Ok(GrantMsg::Granted { grant_id }) => {
                        let outcome = if fail {
                            tally.failures += 1;
                            FlowOutcome::Failure
                        } else {
                            FlowOutcome::Success
                        };
                        if let Err(e) = client.report(grant_id, outcome) {
                            let _ = tx.send(Err(format!("report failed: {e}")));
                            return;
                        }
                        tally.granted += 1;
                    }
                    Ok(GrantMsg::Denied { .. }) => tally.denied += 1,
                    Ok(GrantMsg::TimedOut) => tally.timed_out += 1,
                    Err(e) => {
                        let _ = tx.send(Err(format!("request failed: {e}")));
                        return;
                    }
                }
            }
            let _ = tx.send(Ok(tally));
        });
    }
    drop(tx);

    let mut report = StressReport::default();
    for _ in 0..config.workers {
        let remaining = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(remaining) {
            Ok(Ok(tally)) => {
                report.granted += tally.granted;
                report.denied += tally.denied;
                report.timed_out += tally.timed_out;
                report.failures_reported += tally.failures;
            }
            Ok(Err(message)) => {
                return Err(HarnessError::Infra(format!("worker failed: {message}")))
            }
            Err(_) => {
                let held = cluster
                    .block_on(cluster.engine(0).dump())
                    .unwrap_or_default()
                    .into_iter()
                    .filter(|line| line.contains("(reserved)"))
                    .collect::<Vec<_>>()
                    .join("\n");
                return Err(HarnessError::Assertion(format!(
                    "no progress within {:?}; possible deadlock. held reservations:\n{held}",
                    config.budget
                )));
            }
        }
    }

    // Quiescent now: reports are acked synchronously, so the settlement
    // log and the labels are final.
    let stats = cluster
        .block_on(cluster.engine(0).stats())
        .map_err(|e| HarnessError::Infra(format!("stats: {e}")))?;
    let settled = cluster
        .block_on(cluster.engine(0).settle_log())
        .map_err(|e| HarnessError::Infra(format!("settle log: {e}")))?;
    report.settled = settled.len() as u64;
    report.violations = stats.violations;
    report.leftover_grants = stats.active_grants + stats.remote_holds;

    let oracle = OracleState::replay(settled.iter());
    for id in files.iter().chain(processes.iter()) {
        let actual: BTreeSet<ResourceId> = cluster
            .block_on(cluster.engine(0).get_provenance(id.clone()))
            .map_err(|e| HarnessError::Infra(format!("provenance of {id}: {e}")))?
            .into_iter()
            .map(|summary| summary.id)
            .collect();
        let expected = oracle.provenance(id);
        if actual != expected {
            let render = |set: &BTreeSet<ResourceId>| {
                set.iter()
                    .map(|r| r.canonical())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            report.mismatches.push(format!(
                "{id}: middleware {{{}}} vs model {{{}}}",
                render(&actual),
                render(&expected)
            ));
        }
    }

    report.elapsed = started.elapsed();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_worker_matches_the_model() {
        let report = run_stress(&StressConfig::new(1, 20, 3, 7)).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.granted, 20);
    }

    #[test]
    fn opposing_directions_on_one_resource_complete() {
        let report = run_stress(&StressConfig::new(2, 25, 1, 99)).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn zero_workers_is_a_config_error() {
        assert!(matches!(
            run_stress(&StressConfig::new(0, 1, 1, 0)),
            Err(HarnessError::Infra(_))
        ));
    }
}
