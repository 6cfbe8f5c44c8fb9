// SPDX-License-Identifier: Apache-2.0

//! Consistency auditor for recorded migrations.
//!
//! Replays an event log and checks the two safety orderings the bit vectors
//! exist to guarantee: a page's bytes never leave the source before its
//! save_vec bit is set, and a restore_vec bit is never set before that page
//! was received. Every test run audits its own log.

use std::collections::HashMap;

use crate::event::{EventKind, EventLog};

/// Result of an audit; migrations must produce an empty violation list.
#[derive(Debug, Clone, Default)]
pub struct AuditVerdict {
    pub violations: Vec<String>,
    pub pages_sent: u64,
    pub pages_restored: u64,
}

impl AuditVerdict {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies from `log` that every transfer of page `i` happened after
/// `save_vec[i]` was set and every `restore_vec[i]` transition happened after
/// page `i` was received. Events are compared by `(t_ns, seq)`; the log is
/// append-only so `seq` already orders simultaneous records.
pub fn consistency_audit(log: &EventLog) -> AuditVerdict {
    let mut verdict = AuditVerdict::default();
    let mut saved_at: HashMap<u64, u64> = HashMap::new();
    let mut received_at: HashMap<u64, u64> = HashMap::new();
    let mut restored: HashMap<u64, u64> = HashMap::new();

    for rec in log.records() {
        match rec.kind {
            EventKind::SaveVecSet { page } => {
                if saved_at.insert(page, rec.seq).is_some() {
                    verdict
                        .violations
                        .push(format!("save_vec[{page}] set twice (seq {})", rec.seq));
                }
            }
            EventKind::PageSent { page, .. } => {
                verdict.pages_sent += 1;
                match saved_at.get(&page) {
                    Some(&s) if s < rec.seq => {}
                    Some(_) | None => verdict.violations.push(format!(
                        "page {page} sent (seq {}) before save_vec was set",
                        rec.seq
                    )),
                }
            }
            EventKind::PageReceived { page } => {
                received_at.entry(page).or_insert(rec.seq);
            }
            EventKind::RestoreVecSet { page } => {
                verdict.pages_restored += 1;
                if restored.insert(page, rec.seq).is_some() {
                    verdict
                        .violations
                        .push(format!("restore_vec[{page}] set twice (seq {})", rec.seq));
                }
                match received_at.get(&page) {
                    Some(&r) if r < rec.seq => {}
                    Some(_) | None => verdict.violations.push(format!(
                        "restore_vec[{page}] set (seq {}) before the page was received",
                        rec.seq
                    )),
                }
            }
            _ => {}
        }
    }
    verdict
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_ordering_passes() {
        let mut log = EventLog::new();
        log.push(0, EventKind::SaveVecSet { page: 0 });
        log.push(1, EventKind::PageSent { page: 0, bytes: 10 });
        log.push(2, EventKind::PageReceived { page: 0 });
        log.push(3, EventKind::RestoreVecSet { page: 0 });
        let v = consistency_audit(&log);
        assert!(v.is_clean(), "{:?}", v.violations);
        assert_eq!(v.pages_sent, 1);
        assert_eq!(v.pages_restored, 1);
    }

    #[test]
    fn send_before_save_flagged() {
        let mut log = EventLog::new();
        log.push(0, EventKind::PageSent { page: 4, bytes: 10 });
        log.push(1, EventKind::SaveVecSet { page: 4 });
        let v = consistency_audit(&log);
        assert_eq!(v.violations.len(), 1);
        assert!(v.violations[0].contains("page 4 sent"));
    }

    #[test]
    fn restore_before_receive_flagged() {
        let mut log = EventLog::new();
        log.push(0, EventKind::SaveVecSet { page: 2 });
        log.push(1, EventKind::PageSent { page: 2, bytes: 10 });
        log.push(2, EventKind::RestoreVecSet { page: 2 });
        log.push(3, EventKind::PageReceived { page: 2 });
        let v = consistency_audit(&log);
        assert_eq!(v.violations.len(), 1);
        assert!(v.violations[0].contains("restore_vec[2]"));
    }

    #[test]
    fn fault_response_counts_as_transfer() {
        // A page served out of order must still be saved first.
        let mut log = EventLog::new();
        log.push(0, EventKind::FaultIssued { page: 9 });
        log.push(1, EventKind::SavePrioritized { page: 9 });
        log.push(2, EventKind::SaveVecSet { page: 9 });
        log.push(3, EventKind::PageSent { page: 9, bytes: 10 });
        log.push(4, EventKind::PageReceived { page: 9 });
        log.push(5, EventKind::RestoreVecSet { page: 9 });
        assert!(consistency_audit(&log).is_clean());
    }
}
