// SPDX-License-Identifier: Apache-2.0

//! Per-page readiness flags shared between migration tasks.

use std::sync::atomic::{AtomicU64, Ordering};

/// Which protocol role a vector plays; carried for logging clarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitRole {
    SaveVec,
    RestoreVec,
}

/// Fixed-size vector of atomic flags. Bits only ever transition 0 -> 1
/// within one migration epoch; `set` reports which caller won the race so a
/// page is saved or restored exactly once.
#[derive(Debug)]
pub struct BitVector {
    role: BitRole,
    words: Vec<AtomicU64>,
    len: u64,
    ones: AtomicU64,
}

impl BitVector {
    pub fn new(role: BitRole, len: u64) -> Self {
        let words = (len as usize).div_ceil(64);
        Self {
            role,
            words: (0..words).map(|_| AtomicU64::new(0)).collect(),
            len,
            ones: AtomicU64::new(0),
        }
    }

    pub fn role(&self) -> BitRole {
        self.role
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sets bit `i`, returning true iff this call flipped it.
    pub fn set(&self, i: u64) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        let prev = self.words[(i / 64) as usize].fetch_or(mask, Ordering::AcqRel);
        let newly = prev & mask == 0;
        if newly {
            self.ones.fetch_add(1, Ordering::AcqRel);
        }
        newly
    }

    pub fn get(&self, i: u64) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        self.words[(i / 64) as usize].load(Ordering::Acquire) & mask != 0
    }

    pub fn count_ones(&self) -> u64 {
        self.ones.load(Ordering::Acquire)
    }

    pub fn all_set(&self) -> bool {
        self.count_ones() == self.len
    }

    /// Index of the first zero bit, if any.
    pub fn first_zero(&self) -> Option<u64> {
        (0..self.len).find(|&i| !self.get(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_once_semantics() {
        let v = BitVector::new(BitRole::SaveVec, 130);
        assert!(v.set(129));
        assert!(!v.set(129));
        assert!(v.get(129));
        assert!(!v.get(0));
        assert_eq!(v.count_ones(), 1);
    }

    #[test]
    fn all_set_and_first_zero() {
        let v = BitVector::new(BitRole::RestoreVec, 5);
        for i in [0, 1, 3, 4] {
            v.set(i);
        }
        assert!(!v.all_set());
        assert_eq!(v.first_zero(), Some(2));
        v.set(2);
        assert!(v.all_set());
        assert_eq!(v.first_zero(), None);
    }

    #[test]
    fn empty_vector_is_complete() {
        let v = BitVector::new(BitRole::SaveVec, 0);
        assert!(v.all_set());
    }
}
