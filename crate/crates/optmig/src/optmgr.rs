// SPDX-License-Identifier: Apache-2.0

//! Tracking heap manager inside the enclave.
//!
//! All workload allocation goes through [`OptMgr`], which backs each request
//! with whole enclave pages and records the region (id, offset, size, usage
//! count) in [`MemArr`]. The table is what migration serializes: the
//! destination rebuilds identical regions at identical offsets before the
//! heap bytes arrive, and the access guard consults it to map addresses to
//! backup-buffer slots.

use thiserror::Error;

use crate::enclave::{EnclaveError, EnclaveState, Phase, PAGE_SIZE};

/// Metadata blob format version.
pub const METADATA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptMgrError {
    #[error("unknown region id {0}")]
    UnknownRegion(u64),
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("heap operations forbidden in phase {0:?}")]
    PhaseViolation(Phase),
    #[error("region {0} still has unrestored pages")]
    RegionBusy(u64),
    #[error("metadata decode error: {0}")]
    DecodeError(String),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

/// One live allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemRegion {
    /// Unique within an enclave lifetime, never reused.
    pub id: u64,
    /// Byte offset into the enclave heap; always page aligned.
    pub offset: u64,
    /// Requested size in bytes.
    pub size: u64,
    /// Number of guarded accesses that hit this region this epoch.
    pub usage_count: u64,
}

impl MemRegion {
    pub fn first_page(&self) -> u64 {
        self.offset / PAGE_SIZE as u64
    }

    pub fn page_count(&self) -> u64 {
        self.size.div_ceil(PAGE_SIZE as u64)
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.offset && addr < self.offset + self.size
    }
}

/// Allocation-ordered region table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemArr {
    regions: Vec<MemRegion>,
}

impl MemArr {
    pub fn regions(&self) -> &[MemRegion] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut MemRegion> {
        self.regions.iter_mut().find(|r| r.id == id)
    }

    /// Linear scan for the region containing `addr`, as the table is small
    /// for typical workloads.
    pub fn lookup_linear(&self, addr: u64) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    /// Binary search over regions sorted by offset. Regions never overlap,
    /// so sorting a copy once per call would defeat the point; callers that
    /// need this hot should keep the returned index. Used as the
    /// `indexed-lookup` alternative and as a cross-check oracle in tests.
    pub fn lookup_indexed(&self, addr: u64) -> Option<&MemRegion> {
        let mut sorted: Vec<&MemRegion> = self.regions.iter().collect();
        sorted.sort_by_key(|r| r.offset);
        let idx = sorted.partition_point(|r| r.offset <= addr);
        if idx == 0 {
            return None;
        }
        let candidate = sorted[idx - 1];
        candidate.contains(addr).then_some(candidate)
    }

    pub fn lookup(&self, addr: u64) -> Option<&MemRegion> {
        if cfg!(feature = "indexed-lookup") {
            self.lookup_indexed(addr)
        } else {
            self.lookup_linear(addr)
        }
    }

    /// Total pages across all live regions (the backup-buffer size).
    pub fn total_pages(&self) -> u64 {
        self.regions.iter().map(|r| r.page_count()).sum()
    }
}

/// Serialized image of the heap manager state plus segment images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub memarr: MemArr,
    /// Region ids in backup-buffer layout order.
    pub layout_ids: Vec<u64>,
    pub data_seg: Vec<u8>,
    pub bss_seg: Vec<u8>,
}

/// The heap manager: owns the enclave, the region table, and the data/bss
/// segment images that ride in the metadata buffer.
pub struct OptMgr {
    enclave: EnclaveState,
    memarr: MemArr,
    next_id: u64,
    data_seg: Vec<u8>,
    bss_seg: Vec<u8>,
}

impl std::fmt::Debug for OptMgr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptMgr")
            .field("regions", &self.memarr.len())
            .field("next_id", &self.next_id)
            .finish()
    }
}

impl OptMgr {
    pub fn new(enclave: EnclaveState, data_seg_bytes: usize, bss_seg_bytes: usize) -> Self {
        Self {
            enclave,
            memarr: MemArr::default(),
            next_id: 1,
            data_seg: vec![0u8; data_seg_bytes],
            bss_seg: vec![0u8; bss_seg_bytes],
        }
    }

    pub fn enclave(&self) -> &EnclaveState {
        &self.enclave
    }

    pub fn enclave_mut(&mut self) -> &mut EnclaveState {
        &mut self.enclave
    }

    pub fn memarr(&self) -> &MemArr {
        &self.memarr
    }

    pub fn memarr_mut(&mut self) -> &mut MemArr {
        &mut self.memarr
    }

    pub fn data_seg(&self) -> &[u8] {
        &self.data_seg
    }

    pub fn data_seg_mut(&mut self) -> &mut [u8] {
        &mut self.data_seg
    }

    pub fn bss_seg(&self) -> &[u8] {
        &self.bss_seg
    }

    pub fn bss_seg_mut(&mut self) -> &mut [u8] {
        &mut self.bss_seg
    }

    /// Allocates `size` bytes, returning `(region id, heap offset)`.
    pub fn malloc(&mut self, size: u64) -> Result<(u64, u64), OptMgrError> {
        if size == 0 {
            return Err(OptMgrError::ZeroSize);
        }
        if self.enclave.phase() != Phase::Running {
            return Err(OptMgrError::PhaseViolation(self.enclave.phase()));
        }
        let pages = size.div_ceil(PAGE_SIZE as u64);
        let first = self.enclave.alloc_pages(pages)?;
        let offset = first * PAGE_SIZE as u64;
        let id = self.next_id;
        self.next_id += 1;
        self.memarr.regions.push(MemRegion {
            id,
            offset,
            size,
            usage_count: 0,
        });
        Ok((id, offset))
    }

    /// Frees a region and releases its backing pages.
    pub fn free(&mut self, id: u64) -> Result<(), OptMgrError> {
        if self.enclave.phase() != Phase::Running {
            return Err(OptMgrError::PhaseViolation(self.enclave.phase()));
        }
        let idx = self
            .memarr
            .regions
            .iter()
            .position(|r| r.id == id)
            .ok_or(OptMgrError::UnknownRegion(id))?;
        let region = self.memarr.regions.remove(idx);
        self.enclave
            .free_pages(region.first_page(), region.page_count())?;
        Ok(())
    }

    /// Serializes the region table, layout order, and segment images.
    ///
    /// Layout (little-endian): `[u32 version][u64 region_count]`
    /// `{u64 id, u64 offset, u64 size, u64 usage_count}*`
    /// `[u64 layout id list, one per region]`
    /// `[u64 data_len][data][u64 bss_len][bss]`.
    pub fn serialize_metadata(&self, layout_ids: &[u64]) -> Vec<u8> {
        let n = self.memarr.len();
        debug_assert_eq!(layout_ids.len(), n);
        let mut out = Vec::with_capacity(12 + n * 40 + self.data_seg.len() + self.bss_seg.len());
        out.extend_from_slice(&METADATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for r in &self.memarr.regions {
            out.extend_from_slice(&r.id.to_le_bytes());
            out.extend_from_slice(&r.offset.to_le_bytes());
            out.extend_from_slice(&r.size.to_le_bytes());
            out.extend_from_slice(&r.usage_count.to_le_bytes());
        }
        for id in layout_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.data_seg.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.data_seg);
        out.extend_from_slice(&(self.bss_seg.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.bss_seg);
        out
    }

    /// Decodes a metadata blob produced by [`OptMgr::serialize_metadata`].
    pub fn decode_metadata(blob: &[u8]) -> Result<Metadata, OptMgrError> {
        let mut cur = Cursor::new(blob);
        let version = cur.u32()?;
        if version != METADATA_VERSION {
            return Err(OptMgrError::DecodeError(format!(
                "unsupported metadata version {version}"
            )));
        }
        let count = cur.u64()?;
        if count > (blob.len() as u64) / 32 {
            return Err(OptMgrError::DecodeError(format!(
                "region count {count} impossible for blob of {} bytes",
                blob.len()
            )));
        }
        let mut regions = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = cur.u64()?;
            let offset = cur.u64()?;
            let size = cur.u64()?;
            let usage_count = cur.u64()?;
            if offset % PAGE_SIZE as u64 != 0 {
                return Err(OptMgrError::DecodeError(format!(
                    "region {id} offset {offset} not page aligned"
                )));
            }
            if size == 0 {
                return Err(OptMgrError::DecodeError(format!("region {id} has size 0")));
            }
            regions.push(MemRegion {
                id,
                offset,
                size,
                usage_count,
            });
        }
        let mut layout_ids = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let id = cur.u64()?;
            if !regions.iter().any(|r| r.id == id) {
                return Err(OptMgrError::DecodeError(format!(
                    "layout references unknown region id {id}"
                )));
            }
            if layout_ids.contains(&id) {
                return Err(OptMgrError::DecodeError(format!(
                    "layout repeats region id {id}"
                )));
            }
            layout_ids.push(id);
        }
        let data_len = cur.u64()? as usize;
        let data_seg = cur.bytes(data_len)?.to_vec();
        let bss_len = cur.u64()? as usize;
        let bss_seg = cur.bytes(bss_len)?.to_vec();
        if !cur.at_end() {
            return Err(OptMgrError::DecodeError("trailing bytes".into()));
        }
        Ok(Metadata {
            memarr: MemArr { regions },
            layout_ids,
            data_seg,
            bss_seg,
        })
    }

    /// Rebuilds the heap manager state on a fresh destination enclave:
    /// identical ids, offsets, and sizes; usage counts restart at zero for
    /// the new epoch. Backing pages are allocated at the original offsets,
    /// EAUG-ing anything beyond the committed range.
    pub fn restore_metadata(&mut self, blob: &[u8]) -> Result<Metadata, OptMgrError> {
        let meta = Self::decode_metadata(blob)?;
        for r in &meta.memarr.regions {
            self.enclave.alloc_pages_at(r.first_page(), r.page_count())?;
            self.memarr.regions.push(MemRegion {
                usage_count: 0,
                ..r.clone()
            });
        }
        self.next_id = meta
            .memarr
            .regions
            .iter()
            .map(|r| r.id)
            .max()
            .map_or(1, |m| m + 1)
            .max(self.next_id);
        self.data_seg = meta.data_seg.clone();
        self.bss_seg = meta.bss_seg.clone();
        Ok(meta)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], OptMgrError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| OptMgrError::DecodeError("truncated blob".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, OptMgrError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, OptMgrError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{create_enclave, EnclaveConfig};

    fn mgr(max_pages: u64, committed_pages: u64) -> OptMgr {
        let mut e = create_enclave(EnclaveConfig::new(
            max_pages * PAGE_SIZE as u64,
            committed_pages * PAGE_SIZE as u64,
        ))
        .unwrap();
        e.start().unwrap();
        OptMgr::new(e, 128, 64)
    }

    #[test]
    fn malloc_one_byte_reserves_a_page() {
        let mut m = mgr(16, 16);
        let (id, offset) = m.malloc(1).unwrap();
        assert_eq!(id, 1);
        assert_eq!(offset, 0);
        let r = m.memarr().get(1).unwrap();
        assert_eq!(r.size, 1);
        assert_eq!(r.page_count(), 1);
    }

    #[test]
    fn allocation_order_and_fresh_ids() {
        let mut m = mgr(64, 64);
        let (a, _) = m.malloc(5 * PAGE_SIZE as u64).unwrap();
        let (b, _) = m.malloc(5 * PAGE_SIZE as u64).unwrap();
        assert_eq!((a, b), (1, 2));
        let ids: Vec<u64> = m.memarr().regions().iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2]);
        // Ids are never reused, even after a free.
        m.free(b).unwrap();
        let (c, _) = m.malloc(PAGE_SIZE as u64).unwrap();
        assert_eq!(c, 3);
    }

    #[test]
    fn free_removes_lookup_and_double_free_fails() {
        let mut m = mgr(16, 16);
        let (id, offset) = m.malloc(100).unwrap();
        assert!(m.memarr().lookup(offset + 50).is_some());
        m.free(id).unwrap();
        assert!(m.memarr().lookup(offset + 50).is_none());
        assert_eq!(m.free(id), Err(OptMgrError::UnknownRegion(id)));
    }

    #[test]
    fn ecall_loop_returns_to_baseline() {
        let mut m = mgr(128, 128);
        m.malloc(3 * PAGE_SIZE as u64).unwrap();
        let baseline = m.memarr().len();
        for _ in 0..25 {
            let (id, _) = m.malloc(17 * PAGE_SIZE as u64).unwrap();
            m.free(id).unwrap();
            assert_eq!(m.memarr().len(), baseline);
        }
    }

    #[test]
    fn phase_gate_blocks_mutation_after_pause() {
        let mut m = mgr(16, 16);
        let (id, _) = m.malloc(100).unwrap();
        m.enclave_mut().pause().unwrap();
        assert!(matches!(
            m.malloc(100),
            Err(OptMgrError::PhaseViolation(Phase::Paused))
        ));
        assert!(matches!(
            m.free(id),
            Err(OptMgrError::PhaseViolation(Phase::Paused))
        ));
    }

    #[test]
    fn empty_metadata_round_trip() {
        let m = mgr(16, 16);
        let blob = m.serialize_metadata(&[]);
        let meta = OptMgr::decode_metadata(&blob).unwrap();
        assert!(meta.memarr.is_empty());
        assert_eq!(meta.data_seg.len(), 128);
        assert_eq!(meta.bss_seg.len(), 64);
    }

    #[test]
    fn serialize_is_deterministic_and_round_trips() {
        let mut m = mgr(64, 64);
        let (a, _) = m.malloc(3 * PAGE_SIZE as u64 + 10).unwrap();
        let (b, _) = m.malloc(PAGE_SIZE as u64).unwrap();
        m.memarr_mut().get_mut(a).unwrap().usage_count = 7;
        m.data_seg_mut()[0] = 0xD0;
        m.bss_seg_mut()[1] = 0xB5;

        let layout = vec![b, a];
        let blob1 = m.serialize_metadata(&layout);
        let blob2 = m.serialize_metadata(&layout);
        assert_eq!(blob1, blob2);

        let meta = OptMgr::decode_metadata(&blob1).unwrap();
        assert_eq!(meta.layout_ids, layout);
        assert_eq!(meta.memarr, *m.memarr());
        assert_eq!(meta.data_seg, m.data_seg());
        assert_eq!(meta.bss_seg, m.bss_seg());
    }

    #[test]
    fn restore_rebuilds_regions_with_reset_usage() {
        let mut src = mgr(64, 64);
        let (a, _) = src.malloc(5 * PAGE_SIZE as u64).unwrap();
        let (b, _) = src.malloc(2 * PAGE_SIZE as u64 + 1).unwrap();
        src.memarr_mut().get_mut(a).unwrap().usage_count = 100;
        let blob = src.serialize_metadata(&[a, b]);

        let mut dste = create_enclave(EnclaveConfig::new(64 * 4096, 8 * 4096)).unwrap();
        dste.begin_restore().unwrap();
        let mut dst = OptMgr::new(dste, 0, 0);
        dst.restore_metadata(&blob).unwrap();

        let src_r = src.memarr().get(a).unwrap();
        let dst_r = dst.memarr().get(a).unwrap();
        assert_eq!((dst_r.offset, dst_r.size), (src_r.offset, src_r.size));
        assert_eq!(dst_r.usage_count, 0);
        // Pages beyond the small committed range came from EAUG.
        assert!(dst.enclave().counters().eaug_count > 0);
        // New ids continue after the restored ones.
        dst.enclave_mut().resume().unwrap();
        let (c, _) = dst.malloc(1).unwrap();
        assert_eq!(c, b + 1);
    }

    #[test]
    fn malformed_blobs_rejected() {
        let m = mgr(16, 16);
        let blob = m.serialize_metadata(&[]);
        assert!(OptMgr::decode_metadata(&blob[..blob.len() - 1]).is_err());
        let mut wrong_version = blob.clone();
        wrong_version[0] = 99;
        assert!(OptMgr::decode_metadata(&wrong_version).is_err());
        let mut trailing = blob;
        trailing.push(0);
        assert!(OptMgr::decode_metadata(&trailing).is_err());
        assert!(OptMgr::decode_metadata(&[]).is_err());
    }
}
