// SPDX-License-Identifier: Apache-2.0

//! Append-only migration event log.
//!
//! Every migration records the observable protocol steps (bit-vector
//! transitions, frame transmissions, faults) as a totally ordered sequence of
//! timestamped records. The consistency auditor replays this log to prove the
//! save-before-send and receive-before-restore orderings; the log also round
//! trips through JSON lines so recorded runs can be audited offline.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// One observable protocol step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    MigrationStart,
    PauseIssued,
    PauseComplete,
    SaveSignal,
    RestoreSignal,
    KeysGenerated { pages: u64 },
    MbuffSent { bytes: u64 },
    MbuffRestored,
    MasterKeyDelivered,
    EnclaveInitStart { committed_pages: u64 },
    EnclaveInitDone,
    Resume,
    /// save_vec bit for a backup-buffer slot flipped 0 -> 1.
    SaveVecSet { page: u64 },
    /// Sealed page left the source (background stream or fault response).
    PageSent { page: u64, bytes: u64 },
    /// Sealed page arrived on the destination.
    PageReceived { page: u64 },
    /// Arrived copy discarded because the slot was already restored.
    PageDiscarded { page: u64 },
    /// restore_vec bit for a slot flipped 0 -> 1 after a verified unseal.
    RestoreVecSet { page: u64 },
    FaultIssued { page: u64 },
    /// Fault request hit a page whose frame was already in flight.
    FaultCoalesced { page: u64 },
    FaultServed { page: u64, latency_ns: u64 },
    SavePrioritized { page: u64 },
    AllRestored,
    SourceTeardown,
    MigrationComplete,
}

/// A timestamped, sequence-numbered log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub t_ns: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Append-only event log; `seq` breaks ties between equal timestamps.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t_ns: u64, kind: EventKind) {
        let seq = self.records.len() as u64;
        self.records.push(EventRecord { seq, t_ns, kind });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the log as JSON lines, one record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a JSON-lines log produced by [`EventLog::write_jsonl`].
    pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EventRecord = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            records.push(rec);
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut log = EventLog::new();
        log.push(0, EventKind::MigrationStart);
        log.push(10, EventKind::SaveVecSet { page: 3 });
        log.push(25, EventKind::PageSent { page: 3, bytes: 4173 });
        log.push(40, EventKind::FaultServed { page: 7, latency_ns: 812 });

        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let back = EventLog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.records(), log.records());
    }

    #[test]
    fn seq_is_dense_and_ordered() {
        let mut log = EventLog::new();
        for i in 0..5 {
            log.push(i * 2, EventKind::PageReceived { page: i });
        }
        for (i, rec) in log.records().iter().enumerate() {
            assert_eq!(rec.seq, i as u64);
        }
    }
}
