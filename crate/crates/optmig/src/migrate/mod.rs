// SPDX-License-Identifier: Apache-2.0

//! Migration engines.
//!
//! [`run_optmig`] implements the hybrid protocol: pause, ship sealed
//! metadata and keys synchronously, resume on the destination immediately,
//! and move the sealed heap in the background with demand faults filling the
//! gaps. [`run_stop_and_copy`] and [`run_pre_copy`] are the baselines it is
//! measured against. All engines run on a shared virtual clock and emit an
//! event log the consistency auditor can replay.

mod audit;
mod bitvec;
mod buffers;
mod engine;
mod layout;
mod precopy;
mod report;
mod stopcopy;

use thiserror::Error;

pub use audit::{consistency_audit, AuditVerdict};
pub use bitvec::{BitRole, BitVector};
pub use buffers::{DestBBuff, MBuff, SlotResidency, SourceBBuff};
pub use engine::{run_optmig, OptMigOutcome, OpStream};
pub use layout::{order_layout, Layout, Placement, SlotRef};
pub use precopy::{run_pre_copy, DirtyScript, PlainMemory, PreCopyOutcome};
pub use report::{
    BackgroundSpans, FaultLatencySummary, MigrationReport, PhaseBreakdown, PreCopyStats,
    Protocol, ThroughputSample,
};
pub use stopcopy::{run_stop_and_copy, StopCopyOutcome};

use crate::enclave::EnclaveError;
use crate::guard::GuardError;
use crate::optmgr::OptMgrError;
use crate::seal::SealError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum MigrateError {
    /// The memory backing does not expose what the protocol needs (dirty
    /// tracking for pre-copy on enclave heaps).
    #[error("capability unsupported: {0}")]
    CapabilityUnsupported(&'static str),
    /// The link died. `rolled_back` tells whether the source resumed as the
    /// authority (failure before master-key delivery) or had to stay torn
    /// down (failure after delivery; the destination owns the state).
    #[error("migration aborted: {reason} (source rolled back: {rolled_back})")]
    Aborted { reason: String, rolled_back: bool },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Heap(#[from] OptMgrError),
}

/// Virtual-time cost knobs shared by every engine. Jitter perturbs the
/// per-page costs from the run seed so repeated randomized runs explore
/// different task interleavings while staying reproducible.
#[derive(Debug, Clone, Copy)]
pub struct SimCosts {
    /// Sealing one page on the save task.
    pub seal_ns_per_page: u64,
    /// Unsealing and copying one page on the restore task.
    pub restore_ns_per_page: u64,
    /// Guard page-check and synchronous-restore charges.
    pub check_ns_per_page: u64,
    /// Stopping the workload.
    pub pause_ns: u64,
    /// Attested master-key hand-off.
    pub key_delivery_ns: u64,
    /// Decoding the metadata buffer and rebuilding regions.
    pub metadata_restore_ns: u64,
    /// Multiplicative jitter bound applied to per-page costs (0.0 = exact).
    pub jitter: f64,
}

impl Default for SimCosts {
    fn default() -> Self {
        Self {
            seal_ns_per_page: 3_000,
            restore_ns_per_page: 3_000,
            check_ns_per_page: 100,
            pause_ns: 100_000,
            key_delivery_ns: 300_000,
            metadata_restore_ns: 500_000,
            jitter: 0.10,
        }
    }
}

impl SimCosts {
    /// No jitter: exact analytic timings for model-checking tests.
    pub fn exact() -> Self {
        Self {
            jitter: 0.0,
            ..Self::default()
        }
    }
}
