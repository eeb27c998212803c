use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::transport::MsgType;

pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Default)]
struct Inner {
    bytes: BTreeMap<(u32, Direction, u32, MsgType), u64>,
    frames: u64,
    completed: BTreeSet<u32>,
}

/// Thread-safe byte counters keyed by client, direction, round and
/// message type.
#[derive(Clone, Debug, Default)]
pub struct ByteLedger {
    inner: Arc<Mutex<Inner>>,
}

/// Per-client MB per epoch, averaged over clients and completed rounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerReport {
    pub uplink_mb: f64,
    pub downlink_mb: f64,
    pub combined_mb: f64,
    pub rounds: usize,
    pub clients: usize,
}

impl ByteLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, client: u32, dir: Direction, round: u32, msg_type: MsgType, bytes: usize) {
        let mut g = self.inner.lock().expect("ledger poisoned");
        *g.bytes.entry((client, dir, round, msg_type)).or_default() += bytes as u64;
        g.frames += 1;
    }

    /// Marks `round` as a completed training round for reporting.
    pub fn complete_round(&self, round: u32) {
        self.inner.lock().expect("ledger poisoned").completed.insert(round);
    }

    pub fn completed_rounds(&self) -> usize {
        self.inner.lock().expect("ledger poisoned").completed.len()
    }

    pub fn frames(&self) -> u64 {
        self.inner.lock().expect("ledger poisoned").frames
    }

    pub fn total(&self) -> u64 {
        self.inner.lock().expect("ledger poisoned").bytes.values().sum()
    }

    pub fn total_by(&self, dir: Direction) -> u64 {
        self.sum(|_, d, _, _| d == dir)
    }

    pub fn bytes_of_type(&self, msg_type: MsgType) -> u64 {
        self.sum(|_, _, _, t| t == msg_type)
    }

    /// `(uplink, downlink)` bytes of one round across all clients.
    pub fn round_bytes(&self, round: u32) -> (u64, u64) {
        (
            self.sum(|_, d, r, _| r == round && d == Direction::Uplink),
            self.sum(|_, d, r, _| r == round && d == Direction::Downlink),
        )
    }

    pub fn client_bytes(&self, client: u32, dir: Direction) -> u64 {
        self.sum(|c, d, _, _| c == client && d == dir)
    }

    pub fn clients(&self) -> BTreeSet<u32> {
        self.inner.lock().expect("ledger poisoned").bytes.keys().map(|k| k.0).collect()
    }

    pub fn sum(&self, mut keep: impl FnMut(u32, Direction, u32, MsgType) -> bool) -> u64 {
        let g = self.inner.lock().expect("ledger poisoned");
        g.bytes
            .iter()
            .filter(|((c, d, r, t), _)| keep(*c, *d, *r, *t))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn report(&self, rounds_per_epoch: f64) -> Result<LedgerReport> {
        let (completed, clients) = {
            let g = self.inner.lock().expect("ledger poisoned");
            (g.completed.clone(), g.bytes.keys().map(|k| k.0).collect::<BTreeSet<_>>())
        };
        if completed.is_empty() {
            return Err(Error::Metric("ledger report needs at least one completed round".into()));
        }
        let n = clients.len().max(1) as f64;
        let scale = rounds_per_epoch / (completed.len() as f64 * n * BYTES_PER_MB);
        let up = self.sum(|_, d, r, _| d == Direction::Uplink && completed.contains(&r)) as f64 * scale;
        let down = self.sum(|_, d, r, _| d == Direction::Downlink && completed.contains(&r)) as f64 * scale;
        Ok(LedgerReport {
            uplink_mb: up,
            downlink_mb: down,
            combined_mb: up + down,
            rounds: completed.len(),
            clients: clients.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_report() {
        let l = ByteLedger::new();
        l.record(0, Direction::Uplink, 1, MsgType::Activations, 900);
        l.complete_round(1);
        let r = l.report(1.0).unwrap();
        assert!((r.uplink_mb - 0.0009).abs() < 1e-15);
        assert_eq!(r.downlink_mb, 0.0);
        let doubled = l.report(2.0).unwrap();
        assert!((doubled.uplink_mb - 2.0 * r.uplink_mb).abs() < 1e-15);
    }

    #[test]
    fn zero_rounds_is_an_error() {
        assert!(ByteLedger::new().report(1.0).is_err());
    }

    #[test]
    fn concurrent_increments_sum() {
        let l = ByteLedger::new();
        std::thread::scope(|s| {
            for c in 0..4 {
                let l = l.clone();
                s.spawn(move || {
                    for r in 0..100 {
                        l.record(c, Direction::Uplink, r, MsgType::Loss, 30);
                    }
                });
            }
        });
        assert_eq!(l.total(), 4 * 100 * 30);
        assert_eq!(l.frames(), 400);
    }
}
