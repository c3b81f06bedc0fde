//! Byte accounting for every model-derived message.
//!
//! Convention: each exchanged number is a 32-bit float. A binary prediction
//! needs only `p`, so one value per common-set row.

use serde::Serialize;

pub const BYTES_PER_VALUE: u64 = 4;
/// Accuracy plus loss.
pub const METRICS_BYTES: u64 = 2 * BYTES_PER_VALUE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Payload: total parameter count.
    FullWeights,
    /// Payload: parameters in layers below the shallow boundary.
    ShallowWeights,
    /// Payload: common-set rows.
    Predictions,
    /// Payload ignored.
    Metrics,
}

/// Bytes on the wire for one message.
pub fn account_communication(kind: MessageKind, payload: usize) -> u64 {
    match kind {
        MessageKind::FullWeights | MessageKind::ShallowWeights | MessageKind::Predictions => {
            payload as u64 * BYTES_PER_VALUE
        }
        MessageKind::Metrics => METRICS_BYTES,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CommEntry {
    pub round: usize,
    pub client: usize,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

/// Per-client, per-round traffic for one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    entries: Vec<CommEntry>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, client: usize, sent: u64, received: u64) {
        self.entries.push(CommEntry {
            round,
            client,
            bytes_sent: sent,
            bytes_received: received,
        });
    }

    pub fn entries(&self) -> &[CommEntry] {
        &self.entries
    }

    pub fn total_sent(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes_sent).sum()
    }

    pub fn total_received(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes_received).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_sent() + self.total_received()
    }
}
