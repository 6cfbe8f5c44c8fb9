// SPDX-License-Identifier: Apache-2.0

//! Backup and metadata buffers.
//!
//! `BBuff` is the big, asynchronously shipped buffer of sealed heap pages:
//! the source fills it as the save task seals pages, the destination holds
//! per-slot residency and hands sealed pages to whoever restores them first.
//! `MBuff` is the small, synchronously shipped bundle of sealed metadata plus
//! the wrapped page-key array.

use crate::seal::SealedPage;

/// Source-side backup buffer: one optional sealed page per layout slot.
/// Slots are drained as their frames leave, so peak memory covers only the
/// saved-but-unsent window.
#[derive(Debug)]
pub struct SourceBBuff {
    slots: Vec<Option<SealedPage>>,
}

impl SourceBBuff {
    pub fn new(num_slots: u64) -> Self {
        Self {
            slots: (0..num_slots).map(|_| None).collect(),
        }
    }

    pub fn num_slots(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn put(&mut self, slot: u64, page: SealedPage) {
        let entry = &mut self.slots[slot as usize];
        debug_assert!(entry.is_none(), "slot {slot} sealed twice");
        *entry = Some(page);
    }

    pub fn take(&mut self, slot: u64) -> Option<SealedPage> {
        self.slots[slot as usize].take()
    }

    pub fn is_present(&self, slot: u64) -> bool {
        self.slots[slot as usize].is_some()
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }
}

/// Destination-side residency of one backup-buffer slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotResidency {
    /// Still on the source; reading it means a network fault.
    Remote,
    /// Sealed bytes arrived and wait for a restorer.
    Local,
    /// Unsealed into the enclave heap; the sealed copy is gone.
    Consumed,
}

/// Destination-side backup buffer.
#[derive(Debug)]
pub struct DestBBuff {
    slots: Vec<Option<SealedPage>>,
    residency: Vec<SlotResidency>,
}

impl DestBBuff {
    pub fn new(num_slots: u64) -> Self {
        Self {
            slots: (0..num_slots).map(|_| None).collect(),
            residency: vec![SlotResidency::Remote; num_slots as usize],
        }
    }

    pub fn num_slots(&self) -> u64 {
        self.slots.len() as u64
    }

    pub fn residency(&self, slot: u64) -> SlotResidency {
        self.residency[slot as usize]
    }

    /// Stores an arrived sealed page. Returns false (and drops the copy) if
    /// the slot was already local or consumed — the late copy loses the race.
    pub fn deliver(&mut self, slot: u64, page: SealedPage) -> bool {
        let idx = slot as usize;
        if self.residency[idx] != SlotResidency::Remote {
            return false;
        }
        self.slots[idx] = Some(page);
        self.residency[idx] = SlotResidency::Local;
        true
    }

    /// Takes the sealed page for restoration; the slot becomes Consumed.
    pub fn consume(&mut self, slot: u64) -> Option<SealedPage> {
        let idx = slot as usize;
        if self.residency[idx] != SlotResidency::Local {
            return None;
        }
        self.residency[idx] = SlotResidency::Consumed;
        self.slots[idx].take()
    }
}

/// Synchronously shipped metadata: sealed heap-manager state plus the
/// wrapped per-page key array.
#[derive(Debug, Clone)]
pub struct MBuff {
    pub sealed_metadata: Vec<u8>,
    pub sealed_key_bundle: Vec<u8>,
}

impl MBuff {
    pub fn total_bytes(&self) -> u64 {
        (self.sealed_metadata.len() + self.sealed_key_bundle.len()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sealed(i: u64) -> SealedPage {
        SealedPage {
            page_index: i,
            iv: [0; 16],
            ciphertext: vec![i as u8; 8],
        }
    }

    #[test]
    fn dest_slot_lifecycle() {
        let mut b = DestBBuff::new(2);
        assert_eq!(b.residency(0), SlotResidency::Remote);
        assert!(b.consume(0).is_none());
        assert!(b.deliver(0, sealed(0)));
        assert_eq!(b.residency(0), SlotResidency::Local);
        // Duplicate delivery loses.
        assert!(!b.deliver(0, sealed(0)));
        assert!(b.consume(0).is_some());
        assert_eq!(b.residency(0), SlotResidency::Consumed);
        assert!(b.consume(0).is_none());
        assert!(!b.deliver(0, sealed(0)));
    }

    #[test]
    fn source_put_take() {
        let mut b = SourceBBuff::new(3);
        b.put(1, sealed(1));
        assert!(b.is_present(1));
        assert!(b.take(1).is_some());
        assert!(!b.is_present(1));
        assert!(b.take(1).is_none());
    }
}
