// SPDX-License-Identifier: Apache-2.0

//! Live migration of large simulated secure enclaves.
//!
//! This crate implements a hybrid live-migration protocol for enclaves whose
//! heap is too large for stop-and-copy transfer, together with the classic
//! stop-and-copy and pre-copy baselines. The enclave itself is a software
//! model: page-granular secure memory with committed/uncommitted page
//! accounting, a tracking heap manager, per-page authenticated sealing, and
//! an access-guard layer that makes use-before-restore impossible on the
//! destination while the heap is still in flight.
//!
//! Migrations run on a deterministic virtual clock so downtime and fault
//! counts are exactly reproducible from a seed; the transport layer also
//! speaks the same framed protocol over real stream sockets.

pub mod enclave;
pub mod event;
pub mod guard;
pub mod migrate;
pub mod optmgr;
pub mod seal;
pub mod transport;

pub use enclave::{EnclaveConfig, EnclaveState, InitCostModel, Phase, PAGE_SIZE};
pub use event::{EventKind, EventLog, EventRecord};
pub use guard::{AccessOutcome, RestoreSession};
pub use migrate::{
    consistency_audit, order_layout, BitVector, Layout, MigrationReport, Placement, Protocol,
};
pub use optmgr::{MemArr, MemRegion, OptMgr};
pub use seal::{KeyArr, KeyDeliveryChannel, SealedPage};
pub use transport::{Frame, LinkModel, SimLink};
