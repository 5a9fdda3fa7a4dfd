//! In-memory record of every protocol message a node sends or receives.
//!
//! The log underpins the message-ordering and exact-mediation assertions in
//! the test harness: events carry a node-global sequence number, the channel
//! they traveled on, the direction, a short label naming the message kind,
//! and a free-form detail string.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use flowtrace_core::proto::{Channel, Direction, WireEvent};

#[derive(Debug, Default)]
pub struct WireLog {
    seq: AtomicU64,
    events: Mutex<Vec<WireEvent>>,
}

impl WireLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &self,
        channel: Channel,
        direction: Direction,
        label: impl Into<String>,
        detail: impl Into<String>,
    ) -> u64 {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let event = WireEvent {
            seq,
            channel,
            direction,
            label: label.into(),
            detail: detail.into(),
        };
        self.events.lock().unwrap().push(event);
        seq
    }

    pub fn snapshot(&self) -> Vec<WireEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Number of recorded events matching channel, direction, and label.
    pub fn count(&self, channel: Channel, direction: Direction, label: &str) -> usize {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.channel == channel && e.direction == direction && e.label == label)
            .count()
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }
}
