// SPDX-License-Identifier: Apache-2.0

//! Software-simulated enclave runtime.
//!
//! Models page-granular secure memory with the committed/uncommitted split:
//! committed pages are added up front (EADD, paid for in initialization
//! time), uncommitted pages stay pending and are added on demand (EAUG) and
//! returned to the pool on free (EREMOVE). Initialization cost is accounted
//! virtual time, linear in the committed page count, so experiments charge it
//! to the downtime ledger without sleeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Enclave pages are fixed at 4 KB.
pub const PAGE_SIZE: usize = 4096;

/// Default accounted cost of adding one page at initialization.
///
/// Calibrated so a 1 GiB committed enclave takes ~2 s to initialize.
pub const DEFAULT_PER_PAGE_ADD_COST_NS: u64 = 7_629;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("invalid enclave config: {0}")]
    ConfigInvalid(String),
    #[error("out of enclave memory: no run of {requested} pages available")]
    OutOfEnclaveMemory { requested: u64 },
    #[error("double free of page {page}")]
    DoubleFree { page: u64 },
    #[error("page {page} is not allocated")]
    NotAllocated { page: u64 },
    #[error("enclave is not running (phase {phase:?})")]
    NotRunning { phase: Phase },
    #[error("access to uncommitted-pending page {page}")]
    PendingPageAccess { page: u64 },
    #[error("illegal phase transition {from:?} -> {to:?}")]
    PhaseTransition { from: Phase, to: Phase },
    #[error("heap range {offset}+{len} out of bounds")]
    OutOfBounds { offset: u64, len: u64 },
}

/// Lifecycle phase. Source enclaves walk Fresh -> Running -> Paused ->
/// Saving -> Drained; destination enclaves walk Fresh -> Restoring ->
/// Running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Fresh,
    Running,
    Paused,
    Saving,
    Restoring,
    Drained,
}

/// Per-page residency state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageState {
    /// Not yet part of the enclave; holds no data, unreadable.
    UncommittedPending,
    /// Committed at init (EADD) and currently unused.
    Free,
    /// Committed page handed to the allocator.
    Committed,
    /// Added on demand via EAUG.
    Added,
}

/// Linear initialization cost model: `init_time = committed_pages * per_page`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitCostModel {
    pub per_page_add_cost_ns: u64,
}

impl Default for InitCostModel {
    fn default() -> Self {
        Self {
            per_page_add_cost_ns: DEFAULT_PER_PAGE_ADD_COST_NS,
        }
    }
}

impl InitCostModel {
    pub fn init_time_ns(&self, committed_pages: u64) -> u64 {
        committed_pages * self.per_page_add_cost_ns
    }
}

/// Sizing and cost parameters for one enclave.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnclaveConfig {
    pub max_heap_bytes: u64,
    pub committed_bytes: u64,
    #[serde(default)]
    pub cost_model: InitCostModel,
}

impl EnclaveConfig {
    pub fn new(max_heap_bytes: u64, committed_bytes: u64) -> Self {
        Self {
            max_heap_bytes,
            committed_bytes,
            cost_model: InitCostModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EnclaveError> {
        let page = PAGE_SIZE as u64;
        if self.max_heap_bytes % page != 0 {
            return Err(EnclaveError::ConfigInvalid(format!(
                "max_heap_bytes {} is not a multiple of {page}",
                self.max_heap_bytes
            )));
        }
        if self.committed_bytes % page != 0 {
            return Err(EnclaveError::ConfigInvalid(format!(
                "committed_bytes {} is not a multiple of {page}",
                self.committed_bytes
            )));
        }
        if self.committed_bytes > self.max_heap_bytes {
            return Err(EnclaveError::ConfigInvalid(format!(
                "committed_bytes {} exceeds max_heap_bytes {}",
                self.committed_bytes, self.max_heap_bytes
            )));
        }
        Ok(())
    }

    pub fn total_pages(&self) -> u64 {
        self.max_heap_bytes / PAGE_SIZE as u64
    }

    pub fn committed_pages(&self) -> u64 {
        self.committed_bytes / PAGE_SIZE as u64
    }
}

/// EDMM instruction counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdmmCounters {
    pub eadd_count: u64,
    pub eaug_count: u64,
    pub eremove_count: u64,
}

/// Capability flags of a memory backing, as seen by migration methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryCapabilities {
    /// Page-table dirty tracking works (required by pre-copy).
    pub soft_dirty: bool,
    /// Kernel-assisted user fault handling works (classic post-copy).
    pub userfault: bool,
}

/// The simulated enclave: a flat heap, per-page states, counters, and a
/// lifecycle phase.
pub struct EnclaveState {
    config: EnclaveConfig,
    heap: Vec<u8>,
    page_states: Vec<PageState>,
    counters: EdmmCounters,
    phase: Phase,
    init_time_ns: u64,
}

impl std::fmt::Debug for EnclaveState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnclaveState")
            .field("pages", &self.page_states.len())
            .field("phase", &self.phase)
            .field("counters", &self.counters)
            .finish()
    }
}

/// Builds a fresh enclave per `config`. Committed pages are added (EADD) and
/// start Free; the remainder stays pending. The accounted initialization time
/// follows the config's cost model.
pub fn create_enclave(config: EnclaveConfig) -> Result<EnclaveState, EnclaveError> {
    config.validate()?;
    let total = config.total_pages() as usize;
    let committed = config.committed_pages() as usize;
    let mut page_states = vec![PageState::UncommittedPending; total];
    for state in page_states.iter_mut().take(committed) {
        *state = PageState::Free;
    }
    Ok(EnclaveState {
        heap: vec![0u8; config.max_heap_bytes as usize],
        page_states,
        counters: EdmmCounters {
            eadd_count: committed as u64,
            ..EdmmCounters::default()
        },
        init_time_ns: config.cost_model.init_time_ns(committed as u64),
        config,
        phase: Phase::Fresh,
    })
}

impl EnclaveState {
    pub fn config(&self) -> &EnclaveConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn counters(&self) -> EdmmCounters {
        self.counters
    }

    pub fn init_time_ns(&self) -> u64 {
        self.init_time_ns
    }

    pub fn total_pages(&self) -> u64 {
        self.page_states.len() as u64
    }

    pub fn page_state(&self, page: u64) -> PageState {
        self.page_states[page as usize]
    }

    /// Enclave memory exposes neither soft-dirty bits nor user faults.
    pub fn capabilities(&self) -> MemoryCapabilities {
        MemoryCapabilities {
            soft_dirty: false,
            userfault: false,
        }
    }

    fn transition(&mut self, from: Phase, to: Phase) -> Result<(), EnclaveError> {
        if self.phase != from {
            return Err(EnclaveError::PhaseTransition {
                from: self.phase,
                to,
            });
        }
        self.phase = to;
        Ok(())
    }

    pub fn start(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Fresh, Phase::Running)
    }

    pub fn pause(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Running, Phase::Paused)
    }

    pub fn begin_save(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Paused, Phase::Saving)
    }

    pub fn begin_restore(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Fresh, Phase::Restoring)
    }

    pub fn resume(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Restoring, Phase::Running)
    }

    /// Abort path: an aborted migration hands authority back to the source,
    /// which resumes from Paused or Saving. Only valid before the master key
    /// left the machine.
    pub fn rollback_to_running(&mut self) -> Result<(), EnclaveError> {
        match self.phase {
            Phase::Paused | Phase::Saving => {
                self.phase = Phase::Running;
                Ok(())
            }
            from => Err(EnclaveError::PhaseTransition {
                from,
                to: Phase::Running,
            }),
        }
    }

    /// Zeroizes the heap and drains the enclave after a completed migration.
    pub fn teardown(&mut self) -> Result<(), EnclaveError> {
        self.transition(Phase::Saving, Phase::Drained)?;
        self.heap.fill(0);
        for state in self.page_states.iter_mut() {
            if matches!(state, PageState::Committed | PageState::Added) {
                *state = PageState::Free;
            }
        }
        Ok(())
    }

    /// Runs one short workload step inside the enclave.
    pub fn ecall<T>(
        &mut self,
        f: impl FnOnce(&mut EnclaveState) -> T,
    ) -> Result<T, EnclaveError> {
        if self.phase != Phase::Running {
            return Err(EnclaveError::NotRunning { phase: self.phase });
        }
        Ok(f(self))
    }

    fn page_available(&self, page: usize) -> bool {
        matches!(
            self.page_states[page],
            PageState::Free | PageState::UncommittedPending
        )
    }

    /// Finds the lowest run of `n` contiguous available pages (first fit).
    /// Committed Free pages sit at low addresses, so they are consumed before
    /// pending pages.
    fn find_run(&self, n: u64) -> Option<u64> {
        let n = n as usize;
        let mut run = 0usize;
        for page in 0..self.page_states.len() {
            if self.page_available(page) {
                run += 1;
                if run == n {
                    return Some((page + 1 - n) as u64);
                }
            } else {
                run = 0;
            }
        }
        None
    }

    fn claim(&mut self, page: usize) {
        match self.page_states[page] {
            PageState::Free => self.page_states[page] = PageState::Committed,
            PageState::UncommittedPending => {
                self.counters.eaug_count += 1;
                self.page_states[page] = PageState::Added;
                // A freshly added page starts zeroed.
                let base = page * PAGE_SIZE;
                self.heap[base..base + PAGE_SIZE].fill(0);
            }
            _ => unreachable!("claim of an in-use page"),
        }
    }

    /// Allocates `n` contiguous pages, reusing committed Free pages without
    /// touching the counters and EAUG-ing pending ones. Returns the first
    /// page index.
    pub fn alloc_pages(&mut self, n: u64) -> Result<u64, EnclaveError> {
        if !matches!(self.phase, Phase::Running | Phase::Restoring) {
            return Err(EnclaveError::NotRunning { phase: self.phase });
        }
        if n == 0 {
            return Err(EnclaveError::OutOfEnclaveMemory { requested: 0 });
        }
        let start = self
            .find_run(n)
            .ok_or(EnclaveError::OutOfEnclaveMemory { requested: n })?;
        for page in start..start + n {
            self.claim(page as usize);
        }
        Ok(start)
    }

    /// Allocates an explicit page range (destination-side region rebuild).
    pub fn alloc_pages_at(&mut self, first: u64, n: u64) -> Result<(), EnclaveError> {
        if !matches!(self.phase, Phase::Running | Phase::Restoring) {
            return Err(EnclaveError::NotRunning { phase: self.phase });
        }
        let end = first + n;
        if end > self.total_pages() {
            return Err(EnclaveError::OutOfBounds {
                offset: first * PAGE_SIZE as u64,
                len: n * PAGE_SIZE as u64,
            });
        }
        for page in first..end {
            if !self.page_available(page as usize) {
                return Err(EnclaveError::OutOfEnclaveMemory { requested: n });
            }
        }
        for page in first..end {
            self.claim(page as usize);
        }
        Ok(())
    }

    /// Releases pages: committed pages go back to Free, EAUG'd pages are
    /// EREMOVE'd to the pending pool.
    pub fn free_pages(&mut self, first: u64, n: u64) -> Result<(), EnclaveError> {
        for page in first..first + n {
            match self.page_states[page as usize] {
                PageState::Committed | PageState::Added => {}
                PageState::Free | PageState::UncommittedPending => {
                    return Err(EnclaveError::DoubleFree { page });
                }
            }
        }
        for page in first..first + n {
            let idx = page as usize;
            match self.page_states[idx] {
                PageState::Committed => self.page_states[idx] = PageState::Free,
                PageState::Added => {
                    self.counters.eremove_count += 1;
                    self.page_states[idx] = PageState::UncommittedPending;
                }
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    fn check_range(&self, offset: u64, len: u64, forbid_pending: bool) -> Result<(), EnclaveError> {
        let end = offset
            .checked_add(len)
            .ok_or(EnclaveError::OutOfBounds { offset, len })?;
        if end > self.heap.len() as u64 {
            return Err(EnclaveError::OutOfBounds { offset, len });
        }
        if len == 0 {
            return Ok(());
        }
        if forbid_pending {
            let first = offset / PAGE_SIZE as u64;
            let last = (end - 1) / PAGE_SIZE as u64;
            for page in first..=last {
                if self.page_states[page as usize] == PageState::UncommittedPending {
                    return Err(EnclaveError::PendingPageAccess { page });
                }
            }
        }
        Ok(())
    }

    /// Reads heap bytes. Touching a pending page is a hard error, never
    /// silent zeros.
    pub fn read(&self, offset: u64, len: u64) -> Result<&[u8], EnclaveError> {
        self.check_range(offset, len, true)?;
        Ok(&self.heap[offset as usize..(offset + len) as usize])
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), EnclaveError> {
        self.check_range(offset, data.len() as u64, true)?;
        self.heap[offset as usize..offset as usize + data.len()].copy_from_slice(data);
        Ok(())
    }

    /// Borrows one page frame.
    pub fn page_bytes(&self, page: u64) -> Result<&[u8], EnclaveError> {
        self.check_range(page * PAGE_SIZE as u64, PAGE_SIZE as u64, true)?;
        let base = page as usize * PAGE_SIZE;
        Ok(&self.heap[base..base + PAGE_SIZE])
    }

    pub fn write_page(&mut self, page: u64, bytes: &[u8; PAGE_SIZE]) -> Result<(), EnclaveError> {
        self.check_range(page * PAGE_SIZE as u64, PAGE_SIZE as u64, true)?;
        let base = page as usize * PAGE_SIZE;
        self.heap[base..base + PAGE_SIZE].copy_from_slice(bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;
    const GIB: u64 = 1 << 30;

    #[test]
    fn init_counts_and_time() {
        let e = create_enclave(EnclaveConfig::new(GIB, MIB)).unwrap();
        assert_eq!(e.counters().eadd_count, 256);
        let model = InitCostModel::default();
        assert_eq!(e.init_time_ns(), 256 * model.per_page_add_cost_ns);
        assert_eq!(e.phase(), Phase::Fresh);
        assert_eq!(e.page_state(255), PageState::Free);
        assert_eq!(e.page_state(256), PageState::UncommittedPending);
    }

    #[test]
    fn init_time_hits_the_calibration_point() {
        // 1 GiB committed initializes in 2000 ms within 10%.
        let model = InitCostModel::default();
        let t = model.init_time_ns(GIB / PAGE_SIZE as u64) as f64;
        let target = 2_000_000_000.0;
        assert!((t - target).abs() / target < 0.10, "init {t} ns");
    }

    #[test]
    fn init_time_is_linear() {
        let model = InitCostModel::default();
        for c in [1u64, 7, 256, 262_144] {
            let a = model.init_time_ns(c) as f64;
            let b = model.init_time_ns(2 * c) as f64;
            assert!((b / a - 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn zero_committed() {
        let e = create_enclave(EnclaveConfig::new(GIB, 0)).unwrap();
        assert_eq!(e.counters().eadd_count, 0);
        assert_eq!(e.init_time_ns(), 0);
        assert_eq!(e.page_state(0), PageState::UncommittedPending);
    }

    #[test]
    fn config_rejected() {
        assert!(create_enclave(EnclaveConfig::new(GIB, GIB + 4096)).is_err());
        assert!(create_enclave(EnclaveConfig::new(GIB + 1, 0)).is_err());
        assert!(create_enclave(EnclaveConfig::new(GIB, 100)).is_err());
    }

    #[test]
    fn alloc_reuses_committed_before_eaug() {
        let mut e = create_enclave(EnclaveConfig::new(40 * 4096, 10 * 4096)).unwrap();
        e.start().unwrap();
        // 10 free committed pages: no EAUG.
        let start = e.alloc_pages(10).unwrap();
        assert_eq!(start, 0);
        assert_eq!(e.counters().eaug_count, 0);
        // No committed pages left: all 10 from the pending pool.
        e.alloc_pages(10).unwrap();
        assert_eq!(e.counters().eaug_count, 10);
    }

    #[test]
    fn free_semantics_by_page_kind() {
        let mut e = create_enclave(EnclaveConfig::new(64 * 4096, 16 * 4096)).unwrap();
        e.start().unwrap();
        let committed = e.alloc_pages(16).unwrap();
        let augged = e.alloc_pages(16).unwrap();
        e.free_pages(committed, 16).unwrap();
        assert_eq!(e.counters().eremove_count, 0);
        e.free_pages(augged, 16).unwrap();
        assert_eq!(e.counters().eremove_count, 16);
        assert_eq!(
            e.free_pages(augged, 1),
            Err(EnclaveError::DoubleFree { page: augged })
        );
    }

    #[test]
    fn alloc_free_loop_counters_balance() {
        let mut e = create_enclave(EnclaveConfig::new(8 * 4096, 0)).unwrap();
        e.start().unwrap();
        let k = 57u64;
        for _ in 0..k {
            let p = e.alloc_pages(1).unwrap();
            e.free_pages(p, 1).unwrap();
        }
        assert_eq!(e.counters().eaug_count, k);
        assert_eq!(e.counters().eremove_count, k);
        assert_eq!(e.counters().eadd_count, 0);
    }

    #[test]
    fn pending_read_is_an_error() {
        let e = create_enclave(EnclaveConfig::new(16 * 4096, 4 * 4096)).unwrap();
        assert!(matches!(
            e.read(8 * 4096, 16),
            Err(EnclaveError::PendingPageAccess { page: 8 })
        ));
        // Committed free pages read as data (zeroed), not as an error.
        assert!(e.read(0, 16).is_ok());
    }

    #[test]
    fn ecall_requires_running() {
        let mut e = create_enclave(EnclaveConfig::new(16 * 4096, 16 * 4096)).unwrap();
        assert!(matches!(
            e.ecall(|_| ()),
            Err(EnclaveError::NotRunning { .. })
        ));
        e.start().unwrap();
        e.ecall(|_| ()).unwrap();
        e.pause().unwrap();
        assert!(matches!(
            e.ecall(|_| ()),
            Err(EnclaveError::NotRunning { .. })
        ));
    }

    #[test]
    fn phase_machine_rejects_shortcuts() {
        let mut e = create_enclave(EnclaveConfig::new(16 * 4096, 0)).unwrap();
        assert!(e.pause().is_err());
        assert!(e.teardown().is_err());
        e.start().unwrap();
        assert!(e.begin_restore().is_err());
        e.pause().unwrap();
        e.begin_save().unwrap();
        e.teardown().unwrap();
        assert_eq!(e.phase(), Phase::Drained);
        assert!(e.start().is_err());
    }

    #[test]
    fn teardown_zeroizes() {
        let mut e = create_enclave(EnclaveConfig::new(16 * 4096, 16 * 4096)).unwrap();
        e.start().unwrap();
        let p = e.alloc_pages(2).unwrap();
        e.write(p * 4096, &[0xAA; 64]).unwrap();
        e.pause().unwrap();
        e.begin_save().unwrap();
        e.teardown().unwrap();
        assert!(e.heap.iter().all(|&b| b == 0));
    }

    #[test]
    fn capabilities_are_restricted() {
        let e = create_enclave(EnclaveConfig::new(16 * 4096, 0)).unwrap();
        let caps = e.capabilities();
        assert!(!caps.soft_dirty);
        assert!(!caps.userfault);
    }
}
