// SPDX-License-Identifier: Apache-2.0

//! Migration outcome accounting.

use serde::{Deserialize, Serialize};

use super::layout::Placement;

/// Migration protocol selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    StopAndCopy,
    PreCopy,
    PostCopyOptmigV1,
    PostCopyOptmigV2,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Protocol::StopAndCopy => "stop-and-copy",
            Protocol::PreCopy => "pre-copy",
            Protocol::PostCopyOptmigV1 => "optmig-v1",
            Protocol::PostCopyOptmigV2 => "optmig-v2",
        };
        f.write_str(s)
    }
}

/// Durations of the downtime critical path, disjoint by construction:
/// save (pause to metadata ready, plus full-heap sealing for stop-and-copy),
/// synchronous transfer, destination enclave initialization, and restore
/// work that precedes resume. Background task spans overlap each other and
/// are reported separately.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub save_ns: u64,
    pub transfer_ns: u64,
    pub init_ns: u64,
    pub restore_ns: u64,
}

impl PhaseBreakdown {
    pub fn total_ns(&self) -> u64 {
        self.save_ns + self.transfer_ns + self.init_ns + self.restore_ns
    }
}

/// Wall spans of the asynchronous tasks (first step to last step), which may
/// overlap each other and the resumed workload.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BackgroundSpans {
    pub save_ns: u64,
    pub transfer_ns: u64,
    pub restore_ns: u64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FaultLatencySummary {
    pub count: u64,
    pub min_ns: u64,
    pub mean_ns: u64,
    pub max_ns: u64,
}

impl FaultLatencySummary {
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let sum: u128 = samples.iter().map(|&s| s as u128).sum();
        Self {
            count: samples.len() as u64,
            min_ns: *samples.iter().min().unwrap(),
            mean_ns: (sum / samples.len() as u128) as u64,
            max_ns: *samples.iter().max().unwrap(),
        }
    }
}

/// One throughput sample: operations per second over a bucket starting at
/// `t_ns` on the shared virtual timeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub t_ns: u64,
    pub ops_per_sec: f64,
}

/// Pre-copy specifics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PreCopyStats {
    pub rounds: u32,
    /// False when the dirty set never dropped below the threshold and the
    /// remainder shipped under pause at the round cap.
    pub converged: bool,
    pub final_dirty_pages: u64,
}

/// Everything measured about one migration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MigrationReport {
    pub protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    /// Pause on the source to the first completed post-resume operation.
    pub downtime_ns: u64,
    /// Migration start to source drain (last page acknowledged).
    pub migration_time_ns: u64,
    pub bytes_transferred: u64,
    pub network_fault_count: u64,
    pub phases: PhaseBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundSpans>,
    pub fault_latency: FaultLatencySummary,
    pub throughput_timeline: Vec<ThroughputSample>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precopy: Option<PreCopyStats>,
    /// Backup-buffer pages moved by this migration.
    pub heap_pages: u64,
    // Absolute anchors on the experiment timeline.
    pub start_ns: u64,
    pub pause_ns: u64,
    pub resume_ns: u64,
    pub end_ns: u64,
}

impl MigrationReport {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            placement: None,
            downtime_ns: 0,
            migration_time_ns: 0,
            bytes_transferred: 0,
            network_fault_count: 0,
            phases: PhaseBreakdown::default(),
            background: None,
            fault_latency: FaultLatencySummary::default(),
            throughput_timeline: Vec::new(),
            precopy: None,
            heap_pages: 0,
            start_ns: 0,
            pause_ns: 0,
            resume_ns: 0,
            end_ns: 0,
        }
    }

    /// Internal consistency: downtime never exceeds migration time and the
    /// disjoint phase breakdown fits inside it.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.downtime_ns > self.migration_time_ns {
            return Err(format!(
                "downtime {} exceeds migration time {}",
                self.downtime_ns, self.migration_time_ns
            ));
        }
        if self.phases.total_ns() > self.migration_time_ns {
            return Err(format!(
                "phase sum {} exceeds migration time {}",
                self.phases.total_ns(),
                self.migration_time_ns
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_latency_summary() {
        let s = FaultLatencySummary::from_samples(&[5, 1, 9]);
        assert_eq!((s.count, s.min_ns, s.mean_ns, s.max_ns), (3, 1, 5, 9));
        let z = FaultLatencySummary::from_samples(&[]);
        assert_eq!(z.count, 0);
    }

    #[test]
    fn invariants_catch_bad_reports() {
        let mut r = MigrationReport::new(Protocol::StopAndCopy);
        r.downtime_ns = 10;
        r.migration_time_ns = 5;
        assert!(r.check_invariants().is_err());
        r.migration_time_ns = 10;
        assert!(r.check_invariants().is_ok());
        r.phases.save_ns = 11;
        assert!(r.check_invariants().is_err());
    }

    #[test]
    fn report_serializes() {
        let r = MigrationReport::new(Protocol::PostCopyOptmigV2);
        let json = serde_json::to_string(&r).unwrap();
        let back: MigrationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.protocol, Protocol::PostCopyOptmigV2);
    }
}
