//! Per-label reservation slots.
//!
//! Each label lives behind its own readers-writer lock; holds are owned
//! guards that can cross task boundaries. The atomic reader/writer counters
//! next to the lock exist purely as instrumentation: they re-check the
//! readers-writers invariant on every acquisition so a stress run can assert
//! that exclusivity was never violated.

use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use tokio::sync::{OwnedRwLockReadGuard, OwnedRwLockWriteGuard, RwLock};

use flowtrace_core::{ComplianceFlags, Label, ResourceId};

#[derive(Debug, Default)]
pub(crate) struct SlotState {
    readers: AtomicI64,
    writers: AtomicI64,
}

#[derive(Clone)]
pub(crate) struct LabelSlot {
    lock: Arc<RwLock<Label>>,
    state: Arc<SlotState>,
}

impl LabelSlot {
    pub fn new(id: ResourceId, flags: ComplianceFlags) -> Self {
        Self {
            lock: Arc::new(RwLock::new(Label::new(id, flags))),
            state: Arc::new(SlotState::default()),
        }
    }

    pub async fn acquire_shared(&self, violations: &AtomicU64) -> SharedHold {
        let guard = self.lock.clone().read_owned().await;
        self.state.readers.fetch_add(1, Ordering::SeqCst);
        if self.state.writers.load(Ordering::SeqCst) != 0 {
            violations.fetch_add(1, Ordering::SeqCst);
        }
        SharedHold {
            guard,
            state: self.state.clone(),
        }
    }

    pub async fn acquire_exclusive(&self, violations: &AtomicU64) -> ExclusiveHold {
        let guard = self.lock.clone().write_owned().await;
        let writers = self.state.writers.fetch_add(1, Ordering::SeqCst) + 1;
        if writers != 1 || self.state.readers.load(Ordering::SeqCst) != 0 {
            violations.fetch_add(1, Ordering::SeqCst);
        }
        ExclusiveHold {
            guard,
            state: self.state.clone(),
        }
    }

    /// Non-blocking peek for diagnostics; None while held exclusively.
    pub fn try_snapshot(&self) -> Option<Label> {
        self.lock.try_read().ok().map(|label| label.clone())
    }
}

pub(crate) struct SharedHold {
    guard: OwnedRwLockReadGuard<Label>,
    state: Arc<SlotState>,
}

impl SharedHold {
    pub fn label(&self) -> &Label {
        &self.guard
    }
}

impl Drop for SharedHold {
    fn drop(&mut self) {
        self.state.readers.fetch_sub(1, Ordering::SeqCst);
    }
}

pub(crate) struct ExclusiveHold {
    guard: OwnedRwLockWriteGuard<Label>,
    state: Arc<SlotState>,
}

impl ExclusiveHold {
    pub fn label(&self) -> &Label {
        &self.guard
    }

    pub fn label_mut(&mut self) -> &mut Label {
        &mut self.guard
    }
}

impl Drop for ExclusiveHold {
    fn drop(&mut self) {
        self.state.writers.fetch_sub(1, Ordering::SeqCst);
    }
}
