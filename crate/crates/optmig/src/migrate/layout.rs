// SPDX-License-Identifier: Apache-2.0

//! Backup-buffer layout: the order in which region pages are sealed,
//! shipped, and restored.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::enclave::PAGE_SIZE;
use crate::optmgr::MemArr;

/// Region placement policy for the backup buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Allocation order.
    Naive,
    /// Most-accessed regions first so they restore first.
    Smart,
}

/// Orders region ids for the backup buffer. Smart placement sorts by usage
/// count descending with allocation order breaking ties, so an all-zero count
/// table degenerates to the naive order.
pub fn order_layout(memarr: &MemArr, placement: Placement) -> Vec<u64> {
    let mut ids: Vec<u64> = memarr.regions().iter().map(|r| r.id).collect();
    if placement == Placement::Smart {
        let counts: HashMap<u64, u64> = memarr
            .regions()
            .iter()
            .map(|r| (r.id, r.usage_count))
            .collect();
        ids.sort_by_key(|id| std::cmp::Reverse(counts[id]));
    }
    ids
}

/// Where one backup-buffer slot lives in the heap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub region_id: u64,
    /// Page index within the region.
    pub page_in_region: u64,
    /// Absolute heap page index.
    pub heap_page: u64,
}

#[derive(Debug, Clone, Copy)]
struct RegionSpan {
    base_slot: u64,
    page_count: u64,
    offset: u64,
    size: u64,
}

/// Slot-level view of a region ordering: maps backup-buffer slots to heap
/// pages and back. Both sides derive the identical layout from the metadata
/// buffer, which is what lets a slot index name a page on the wire.
#[derive(Debug, Clone)]
pub struct Layout {
    region_ids: Vec<u64>,
    slots: Vec<SlotRef>,
    spans: HashMap<u64, RegionSpan>,
}

impl Layout {
    /// Builds the slot map for `ids` (every id must be in `memarr`).
    pub fn build(memarr: &MemArr, ids: &[u64]) -> Self {
        let mut slots = Vec::new();
        let mut spans = HashMap::new();
        for &id in ids {
            let region = memarr.get(id).expect("layout id not in MemArr");
            let base_slot = slots.len() as u64;
            for k in 0..region.page_count() {
                slots.push(SlotRef {
                    region_id: id,
                    page_in_region: k,
                    heap_page: region.first_page() + k,
                });
            }
            spans.insert(
                id,
                RegionSpan {
                    base_slot,
                    page_count: region.page_count(),
                    offset: region.offset,
                    size: region.size,
                },
            );
        }
        Self {
            region_ids: ids.to_vec(),
            slots,
            spans,
        }
    }

    pub fn region_ids(&self) -> &[u64] {
        &self.region_ids
    }

    pub fn num_slots(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn slot(&self, slot: u64) -> SlotRef {
        self.slots[slot as usize]
    }

    /// Is this region part of the layout at all?
    pub fn covers_region(&self, region_id: u64) -> bool {
        self.spans.contains_key(&region_id)
    }

    /// Backup-buffer slots covering `[addr, addr + len)` within `region_id`.
    /// Returns an empty range for regions outside the layout.
    pub fn slots_for_range(&self, region_id: u64, addr: u64, len: u64) -> std::ops::Range<u64> {
        let Some(span) = self.spans.get(&region_id) else {
            return 0..0;
        };
        debug_assert!(addr >= span.offset && addr + len <= span.offset + span.size);
        if len == 0 {
            return 0..0;
        }
        let first = (addr - span.offset) / PAGE_SIZE as u64;
        let last = (addr + len - 1 - span.offset) / PAGE_SIZE as u64;
        span.base_slot + first..span.base_slot + last + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enclave::{create_enclave, EnclaveConfig};
    use crate::optmgr::OptMgr;

    fn mgr_with_regions(sizes: &[u64]) -> (OptMgr, Vec<u64>) {
        let pages: u64 = sizes.iter().map(|s| s.div_ceil(4096)).sum::<u64>() + 8;
        let mut e = create_enclave(EnclaveConfig::new(pages * 4096, pages * 4096)).unwrap();
        e.start().unwrap();
        let mut m = OptMgr::new(e, 0, 0);
        let ids = sizes.iter().map(|&s| m.malloc(s).unwrap().0).collect();
        (m, ids)
    }

    #[test]
    fn zero_counts_keep_allocation_order() {
        let (m, ids) = mgr_with_regions(&[4096, 8192, 4096]);
        assert_eq!(order_layout(m.memarr(), Placement::Smart), ids);
        assert_eq!(order_layout(m.memarr(), Placement::Naive), ids);
    }

    #[test]
    fn hot_region_moves_to_front() {
        let (mut m, ids) = mgr_with_regions(&[4096, 4096]);
        m.memarr_mut().get_mut(ids[0]).unwrap().usage_count = 1;
        m.memarr_mut().get_mut(ids[1]).unwrap().usage_count = 1000;
        assert_eq!(
            order_layout(m.memarr(), Placement::Smart),
            vec![ids[1], ids[0]]
        );
        assert_eq!(order_layout(m.memarr(), Placement::Naive), ids);
    }

    #[test]
    fn slot_mapping_round_trips() {
        let (m, ids) = mgr_with_regions(&[4096 * 3, 100, 4096 * 2 + 1]);
        let order = vec![ids[2], ids[0], ids[1]];
        let layout = Layout::build(m.memarr(), &order);
        assert_eq!(layout.num_slots(), 3 + 1 + 3);
        // First region in layout is ids[2]: slots 0..3.
        let r2 = m.memarr().get(ids[2]).unwrap();
        let range = layout.slots_for_range(ids[2], r2.offset + 4096, 2);
        assert_eq!(range, 1..2);
        for slot in 0..layout.num_slots() {
            let sref = layout.slot(slot);
            let region = m.memarr().get(sref.region_id).unwrap();
            assert_eq!(
                sref.heap_page,
                region.first_page() + sref.page_in_region
            );
        }
        assert!(!layout.covers_region(999));
    }
}
