// SPDX-License-Identifier: Apache-2.0

//! Access guard: the check layer in front of every workload heap access.
//!
//! Workload steps declare their heap reads and writes as `(region, offset,
//! len)` effects; the executor runs `process_access` for each declared range
//! before any byte moves, so an undeclared raw access to enclave memory is
//! impossible through the workload API. On a freshly restored destination the
//! check pulls any missing pages — unsealing locally resident ones and
//! raising network faults for remote ones — which is what makes
//! use-before-restore unreachable. Once everything is restored a global flag
//! reduces the check to a usage-count increment.

use thiserror::Error;

use crate::enclave::PAGE_SIZE;
use crate::migrate::{BitRole, BitVector, DestBBuff, Layout, SlotResidency};
use crate::optmgr::{OptMgr, OptMgrError};
use crate::seal::{unseal_page, Key256, SealError, SealedPage};

#[derive(Debug, Error)]
pub enum GuardError {
    /// The range is not contained in a single live region: a workload bug.
    #[error("wild access: [{addr}, +{len}) is not within one live region")]
    WildAccess { addr: u64, len: u64 },
    #[error("all-restored flag raised while restore_vec still has zeros")]
    PrematureFlag,
    #[error("read verification failed at region {region_id} offset {offset}")]
    Corruption { region_id: u64, offset: u64 },
    #[error("slot {0} cannot be pulled synchronously")]
    Unavailable(u64),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Heap(#[from] OptMgrError),
    #[error(transparent)]
    Enclave(#[from] crate::enclave::EnclaveError),
}

/// What one guarded access did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessOutcome {
    pub region_id: u64,
    pub pages_checked: u64,
    pub pages_synchronously_restored: u64,
    pub network_faults_raised: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// Virtual-time prices the guard charges per page.
#[derive(Debug, Clone, Copy)]
pub struct GuardCosts {
    pub check_ns_per_page: u64,
    pub unseal_ns_per_page: u64,
}

impl Default for GuardCosts {
    fn default() -> Self {
        Self {
            check_ns_per_page: 100,
            unseal_ns_per_page: 3_000,
        }
    }
}

/// Destination-side restore state for one migration epoch: the backup
/// buffer, restore_vec, per-slot keys, and the all-restored fast-path flag.
pub struct RestoreSession {
    layout: Layout,
    restore_vec: BitVector,
    bbuff: DestBBuff,
    page_keys: Vec<Key256>,
    all_restored: bool,
    /// Guard writes as well as reads (default). The read-only variant is an
    /// optimization flag; with it, a partial-page write to an unrestored page
    /// would be clobbered when the page is later restored, so it stays off
    /// unless a workload is known to be read-dominated.
    read_only_checks: bool,
    /// Slot a workload access is currently parked on; the background restore
    /// task skips it so the fault path consumes the page it asked for.
    awaited_slot: Option<u64>,
    bitvec_reads: u64,
    total_faults: u64,
    total_sync_restored: u64,
}

impl std::fmt::Debug for RestoreSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RestoreSession")
            .field("slots", &self.restore_vec.len())
            .field("restored", &self.restore_vec.count_ones())
            .field("all_restored", &self.all_restored)
            .finish()
    }
}

impl RestoreSession {
    pub fn new(layout: Layout, page_keys: Vec<Key256>) -> Self {
        let slots = layout.num_slots();
        assert_eq!(page_keys.len() as u64, slots, "one key per slot");
        Self {
            layout,
            restore_vec: BitVector::new(BitRole::RestoreVec, slots),
            bbuff: DestBBuff::new(slots),
            page_keys,
            all_restored: false,
            read_only_checks: false,
            awaited_slot: None,
            bitvec_reads: 0,
            total_faults: 0,
            total_sync_restored: 0,
        }
    }

    pub fn with_read_only_checks(mut self, enabled: bool) -> Self {
        self.read_only_checks = enabled;
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn restore_vec(&self) -> &BitVector {
        &self.restore_vec
    }

    pub fn all_restored(&self) -> bool {
        self.all_restored
    }

    pub fn bitvec_reads(&self) -> u64 {
        self.bitvec_reads
    }

    pub fn total_faults(&self) -> u64 {
        self.total_faults
    }

    pub fn total_sync_restored(&self) -> u64 {
        self.total_sync_restored
    }

    pub fn residency(&self, slot: u64) -> SlotResidency {
        self.bbuff.residency(slot)
    }

    pub fn awaited_slot(&self) -> Option<u64> {
        self.awaited_slot
    }

    /// Stores an arrived sealed page; false means the copy lost the race and
    /// was discarded.
    pub fn deliver(&mut self, page: SealedPage) -> bool {
        self.bbuff.deliver(page.page_index, page)
    }

    fn check_bit(&mut self, slot: u64) -> bool {
        self.bitvec_reads += 1;
        self.restore_vec.get(slot)
    }

    /// Unseals a locally resident slot into the enclave heap and marks it
    /// restored. Returns false if the slot was already restored or is not
    /// local; the caller decides whether that is a skip or an error.
    pub fn restore_slot(&mut self, slot: u64, mgr: &mut OptMgr) -> Result<bool, GuardError> {
        if self.restore_vec.get(slot) {
            return Ok(false);
        }
        let Some(sealed) = self.bbuff.consume(slot) else {
            return Ok(false);
        };
        let plain = unseal_page(&sealed, &self.page_keys[slot as usize])?;
        let heap_page = self.layout.slot(slot).heap_page;
        mgr.enclave_mut().write_page(heap_page, &plain)?;
        let newly = self.restore_vec.set(slot);
        debug_assert!(newly);
        Ok(true)
    }

    /// Raises the global fast-path flag once every slot is restored.
    pub fn set_all_restored(&mut self) -> Result<(), GuardError> {
        if !self.restore_vec.all_set() {
            return Err(GuardError::PrematureFlag);
        }
        self.all_restored = true;
        Ok(())
    }
}

/// Resumable state of one guarded access. `advance` either completes or
/// parks on a remote slot; the caller raises the network fault and calls
/// `advance` again once the page landed.
#[derive(Debug)]
pub struct AccessCheck {
    slots: std::ops::Range<u64>,
    cursor: u64,
    outcome: AccessOutcome,
    /// Slots this access restored synchronously, for the caller to log.
    pub restored_now: Vec<u64>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Done(AccessOutcome),
    /// Blocked: the slot is remote and must be faulted in.
    WaitSlot(u64),
}

/// Looks up the region, bumps its usage count, and builds the page check for
/// `[addr, addr+len)`. Returns `WildAccess` when the range is not contained
/// in one live region.
pub fn start_access(
    mgr: &mut OptMgr,
    session: Option<&mut RestoreSession>,
    addr: u64,
    len: u64,
    kind: AccessKind,
) -> Result<AccessCheck, GuardError> {
    let region = mgr
        .memarr()
        .lookup(addr)
        .ok_or(GuardError::WildAccess { addr, len })?;
    if len > 0 && addr + len > region.offset + region.size {
        return Err(GuardError::WildAccess { addr, len });
    }
    let region_id = region.id;
    mgr.memarr_mut().get_mut(region_id).unwrap().usage_count += 1;

    let slots = match session {
        Some(session)
            if !session.all_restored
                && session.layout.covers_region(region_id)
                && !(session.read_only_checks && kind == AccessKind::Write) =>
        {
            session.layout.slots_for_range(region_id, addr, len)
        }
        // Fast path: count the access and skip the page walk entirely.
        _ => 0..0,
    };
    let pages_checked = slots.end - slots.start;
    Ok(AccessCheck {
        cursor: slots.start,
        slots,
        outcome: AccessOutcome {
            region_id,
            pages_checked,
            ..AccessOutcome::default()
        },
        restored_now: Vec::new(),
    })
}

impl AccessCheck {
    /// Walks the covering slots: restored pages are skipped, local pages are
    /// unsealed in place, a remote page parks the access.
    pub fn advance(
        &mut self,
        mgr: &mut OptMgr,
        mut session: Option<&mut RestoreSession>,
    ) -> Result<CheckStatus, GuardError> {
        while self.cursor < self.slots.end {
            let slot = self.cursor;
            let session = session
                .as_deref_mut()
                .expect("page checks exist only with a session");
            if session.check_bit(slot) {
                session.awaited_slot = None;
                self.cursor += 1;
                continue;
            }
            match session.residency(slot) {
                SlotResidency::Local => {
                    let restored = session.restore_slot(slot, mgr)?;
                    debug_assert!(restored);
                    session.awaited_slot = None;
                    session.total_sync_restored += 1;
                    self.outcome.pages_synchronously_restored += 1;
                    self.restored_now.push(slot);
                    self.cursor += 1;
                }
                SlotResidency::Remote => {
                    session.awaited_slot = Some(slot);
                    return Ok(CheckStatus::WaitSlot(slot));
                }
                // Consumed but bit unset cannot happen: restore_slot sets the
                // bit before releasing the sealed copy.
                SlotResidency::Consumed => unreachable!("consumed slot with clear bit"),
            }
        }
        Ok(CheckStatus::Done(self.outcome))
    }

    /// Records that the caller raised a network fault for the awaited slot.
    pub fn note_fault(&mut self, session: &mut RestoreSession) {
        self.outcome.network_faults_raised += 1;
        session.total_faults += 1;
    }

    pub fn outcome(&self) -> AccessOutcome {
        self.outcome
    }
}

/// Synchronous `process_access`: completes the whole check in one call,
/// pulling remote slots through `fetch` (which stands in for the network
/// fault path). Engine code uses the resumable [`AccessCheck`] instead.
pub fn process_access(
    mgr: &mut OptMgr,
    mut session: Option<&mut RestoreSession>,
    addr: u64,
    len: u64,
    kind: AccessKind,
    mut fetch: impl FnMut(u64) -> Result<SealedPage, GuardError>,
) -> Result<AccessOutcome, GuardError> {
    let mut check = start_access(mgr, session.as_deref_mut(), addr, len, kind)?;
    loop {
        match check.advance(mgr, session.as_deref_mut())? {
            CheckStatus::Done(outcome) => return Ok(outcome),
            CheckStatus::WaitSlot(slot) => {
                let session = session.as_deref_mut().unwrap();
                let page = fetch(slot)?;
                check.note_fault(session);
                if !session.deliver(page) {
                    return Err(GuardError::Unavailable(slot));
                }
            }
        }
    }
}

/// One declared effect of a workload step. Regions are named by
/// workload-local tags bound at allocation time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepAction {
    Alloc {
        bytes: u64,
        tag: u32,
    },
    Free {
        tag: u32,
    },
    Read {
        tag: u32,
        offset: u64,
        len: u64,
        /// Expected pattern seed; mismatching bytes fail the run.
        verify: Option<u64>,
    },
    Write {
        tag: u32,
        offset: u64,
        len: u64,
        pattern: u64,
    },
}

/// A workload step with its declared accesses; built by [`instrument`], the
/// only way workload code reaches enclave memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentedStep {
    actions: Vec<StepAction>,
    compute_ns: u64,
}

impl InstrumentedStep {
    pub fn actions(&self) -> &[StepAction] {
        &self.actions
    }

    pub fn compute_ns(&self) -> u64 {
        self.compute_ns
    }
}

/// Wraps declared heap effects into an executable step.
pub fn instrument(actions: Vec<StepAction>, compute_ns: u64) -> InstrumentedStep {
    InstrumentedStep {
        actions,
        compute_ns,
    }
}

/// Deterministic byte pattern for writes and read verification.
pub fn pattern_byte(seed: u64, index: u64) -> u8 {
    let mut x = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 33;
    x = x.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    x ^= x >> 29;
    x as u8
}

fn fold_digest(digest: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *digest = (*digest ^ b as u64).wrapping_mul(0x1000_0000_01B3);
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum StepStatus {
    Done,
    /// Parked on a remote slot; resume with `advance_step` after delivery.
    WaitSlot(u64),
}

/// Executes instrumented steps against a heap manager, resumable across
/// network faults. Tracks the tag table, a running digest of every byte
/// read, and the virtual time charged to checks and synchronous restores.
pub struct StepExecutor {
    regions: Vec<Option<u64>>,
    pub digest: u64,
    action_idx: usize,
    check: Option<AccessCheck>,
    charged_ns: u64,
    strict: bool,
    costs: GuardCosts,
    /// Slots restored synchronously since the last drain, for caller logging.
    restored_sink: Vec<u64>,
}

impl StepExecutor {
    pub fn new(strict: bool, costs: GuardCosts) -> Self {
        Self {
            regions: vec![None; 64],
            digest: 0xcbf2_9ce4_8422_2325,
            action_idx: 0,
            check: None,
            charged_ns: 0,
            strict,
            costs,
        restored_sink: Vec::new(),
        }
    }

    pub fn charged_ns(&self) -> u64 {
        self.charged_ns
    }

    pub fn drain_restored(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.restored_sink)
    }

    /// Region id bound to a workload tag, if any.
    pub fn region_of(&self, tag: u32) -> Option<u64> {
        self.regions.get(tag as usize).copied().flatten()
    }

    pub fn begin_step(&mut self) {
        self.action_idx = 0;
        self.check = None;
    }

    /// Lets the caller mark the in-progress access as having raised a fault.
    pub fn note_fault(&mut self, session: &mut RestoreSession) {
        if let Some(check) = self.check.as_mut() {
            check.note_fault(session);
        }
    }

    fn tag_region(&self, tag: u32) -> Result<u64, GuardError> {
        self.region_of(tag).ok_or(GuardError::WildAccess {
            addr: u64::MAX,
            len: tag as u64,
        })
    }

    fn bind_tag(&mut self, tag: u32, id: Option<u64>) {
        let idx = tag as usize;
        if idx >= self.regions.len() {
            self.regions.resize(idx + 1, None);
        }
        self.regions[idx] = id;
    }

    /// Runs the step from where it left off. `WaitSlot` means a remote page
    /// is needed; deliver it to the session and call again.
    pub fn advance_step(
        &mut self,
        step: &InstrumentedStep,
        mgr: &mut OptMgr,
        mut session: Option<&mut RestoreSession>,
    ) -> Result<StepStatus, GuardError> {
        while self.action_idx < step.actions.len() {
            let action = &step.actions[self.action_idx];
            match action {
                StepAction::Alloc { bytes, tag } => {
                    let (id, _) = mgr.malloc(*bytes)?;
                    self.bind_tag(*tag, Some(id));
                    self.action_idx += 1;
                }
                StepAction::Free { tag } => {
                    let id = self.tag_region(*tag)?;
                    mgr.free(id)?;
                    self.bind_tag(*tag, None);
                    self.action_idx += 1;
                }
                StepAction::Read {
                    tag,
                    offset,
                    len,
                    verify,
                } => {
                    let id = self.tag_region(*tag)?;
                    let base = mgr.memarr().get(id).unwrap().offset;
                    match self.run_check(mgr, session.as_deref_mut(), base + offset, *len, AccessKind::Read)? {
                        StepStatus::WaitSlot(slot) => return Ok(StepStatus::WaitSlot(slot)),
                        StepStatus::Done => {}
                    }
                    let bytes = mgr.enclave().read(base + offset, *len)?;
                    fold_digest(&mut self.digest, bytes);
                    if let Some(seed) = verify {
                        for (i, &b) in bytes.iter().enumerate() {
                            if b != pattern_byte(*seed, offset + i as u64) {
                                return Err(GuardError::Corruption {
                                    region_id: id,
                                    offset: offset + i as u64,
                                });
                            }
                        }
                    }
                    self.action_idx += 1;
                }
                StepAction::Write {
                    tag,
                    offset,
                    len,
                    pattern,
                } => {
                    let id = self.tag_region(*tag)?;
                    let base = mgr.memarr().get(id).unwrap().offset;
                    match self.run_check(mgr, session.as_deref_mut(), base + offset, *len, AccessKind::Write)? {
                        StepStatus::WaitSlot(slot) => return Ok(StepStatus::WaitSlot(slot)),
                        StepStatus::Done => {}
                    }
                    let data: Vec<u8> = (0..*len)
                        .map(|i| pattern_byte(*pattern, offset + i))
                        .collect();
                    mgr.enclave_mut().write(base + offset, &data)?;
                    self.action_idx += 1;
                }
            }
        }
        self.charged_ns += step.compute_ns;
        Ok(StepStatus::Done)
    }

    fn run_check(
        &mut self,
        mgr: &mut OptMgr,
        mut session: Option<&mut RestoreSession>,
        addr: u64,
        len: u64,
        kind: AccessKind,
    ) -> Result<StepStatus, GuardError> {
        if self.check.is_none() {
            match start_access(mgr, session.as_deref_mut(), addr, len, kind) {
                Ok(check) => self.check = Some(check),
                Err(e @ GuardError::WildAccess { .. }) if !self.strict => {
                    // Bench mode: report and carry on without the check.
                    log::warn!("ignoring wild access: {e}");
                    return Ok(StepStatus::Done);
                }
                Err(e) => return Err(e),
            }
        }
        let check = self.check.as_mut().unwrap();
        match check.advance(mgr, session)? {
            CheckStatus::Done(outcome) => {
                self.charged_ns += outcome.pages_checked * self.costs.check_ns_per_page
                    + outcome.pages_synchronously_restored * self.costs.unseal_ns_per_page;
                let check = self.check.take().unwrap();
                self.restored_sink.extend_from_slice(&check.restored_now);
                Ok(StepStatus::Done)
            }
            CheckStatus::WaitSlot(slot) => Ok(StepStatus::WaitSlot(slot)),
        }
    }
}
