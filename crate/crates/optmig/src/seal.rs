// SPDX-License-Identifier: Apache-2.0

//! Page sealing and migration key management.
//!
//! Each migration epoch gets a fresh 256-bit master key plus one 256-bit key
//! per heap page. A page is sealed by appending its SHA-256 digest and
//! encrypting `page || digest` with AES-256-CTR under the page key and a
//! random per-page IV; unsealing recomputes the digest and rejects any
//! mismatch. The page-key array travels wrapped under the master key, and the
//! master key itself crosses machines through a trusted channel that releases
//! it exactly once per epoch.

use aes::cipher::{KeyIvInit, StreamCipher};
use aes::Aes256;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enclave::PAGE_SIZE;

type Aes256Ctr = ctr::Ctr128BE<Aes256>;

/// Sealed-bundle format version ([`wrap_key_bundle`], metadata buffers).
pub const BUNDLE_VERSION: u32 = 1;

/// Ciphertext length of a sealed page: page bytes plus SHA-256 digest.
pub const SEALED_PAGE_LEN: usize = PAGE_SIZE + 32;

pub type Key256 = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    /// Decryption produced data whose embedded digest does not match: the
    /// ciphertext was tampered with or the key belongs to a different
    /// page/epoch.
    #[error("integrity failure: digest mismatch after decryption")]
    IntegrityFailure,
    #[error("sealed input has invalid length {0}")]
    InvalidLength(usize),
    #[error("unsupported sealed-bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("master key was already delivered for this epoch")]
    AlreadyDelivered,
}

/// Per-migration key material: the master key plus one key per heap page.
pub struct KeyArr {
    master_key: Key256,
    page_keys: Vec<Key256>,
}

impl KeyArr {
    /// Generates a fresh master key and `num_pages` page keys from `rng`.
    pub fn generate<R: RngCore>(num_pages: u64, rng: &mut R) -> Self {
        let mut master_key = [0u8; 32];
        rng.fill_bytes(&mut master_key);
        let mut page_keys = Vec::with_capacity(num_pages as usize);
        for _ in 0..num_pages {
            let mut k = [0u8; 32];
            rng.fill_bytes(&mut k);
            page_keys.push(k);
        }
        Self {
            master_key,
            page_keys,
        }
    }

    /// Generates keys from the OS entropy source.
    pub fn generate_os(num_pages: u64) -> Self {
        Self::generate(num_pages, &mut rand::rngs::OsRng)
    }

    pub fn master_key(&self) -> &Key256 {
        &self.master_key
    }

    pub fn page_key(&self, index: u64) -> &Key256 {
        &self.page_keys[index as usize]
    }

    pub fn page_keys(&self) -> &[Key256] {
        &self.page_keys
    }

    pub fn num_pages(&self) -> u64 {
        self.page_keys.len() as u64
    }
}

impl Drop for KeyArr {
    fn drop(&mut self) {
        self.master_key.fill(0);
        for k in &mut self.page_keys {
            k.fill(0);
        }
    }
}

impl std::fmt::Debug for KeyArr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Key bytes never reach logs.
        f.debug_struct("KeyArr")
            .field("pages", &self.page_keys.len())
            .finish()
    }
}

/// Ciphertext of one 4 KB page plus its digest, under that page's key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPage {
    pub page_index: u64,
    pub iv: [u8; 16],
    /// `AES-256-CTR(key, iv, page_bytes || SHA-256(page_bytes))`.
    pub ciphertext: Vec<u8>,
}

impl SealedPage {
    pub fn sealed_len(&self) -> usize {
        self.ciphertext.len()
    }
}

fn apply_ctr(key: &Key256, iv: &[u8; 16], data: &mut [u8]) {
    let mut cipher = Aes256Ctr::new(key.into(), iv.into());
    cipher.apply_keystream(data);
}

/// Seals one page under `key`, tagging it with `page_index`.
pub fn seal_page<R: RngCore>(
    page_index: u64,
    page: &[u8; PAGE_SIZE],
    key: &Key256,
    rng: &mut R,
) -> SealedPage {
    let mut iv = [0u8; 16];
    rng.fill_bytes(&mut iv);
    let digest = Sha256::digest(page);
    let mut buf = Vec::with_capacity(SEALED_PAGE_LEN);
    buf.extend_from_slice(page);
    buf.extend_from_slice(&digest);
    apply_ctr(key, &iv, &mut buf);
    SealedPage {
        page_index,
        iv,
        ciphertext: buf,
    }
}

/// Decrypts and verifies a sealed page, returning the plaintext page bytes.
pub fn unseal_page(sealed: &SealedPage, key: &Key256) -> Result<Box<[u8; PAGE_SIZE]>, SealError> {
    if sealed.ciphertext.len() != SEALED_PAGE_LEN {
        return Err(SealError::InvalidLength(sealed.ciphertext.len()));
    }
    let mut buf = sealed.ciphertext.clone();
    apply_ctr(key, &sealed.iv, &mut buf);
    let (page, digest) = buf.split_at(PAGE_SIZE);
    if Sha256::digest(page).as_slice() != digest {
        return Err(SealError::IntegrityFailure);
    }
    let mut out = Box::new([0u8; PAGE_SIZE]);
    out.copy_from_slice(page);
    Ok(out)
}

/// Seals an arbitrary blob under `key` in the sealed-bundle layout:
/// `[u32 version][16-byte IV][u64 ciphertext_len][ciphertext]` with
/// `ciphertext = AES-256-CTR(key, iv, blob || SHA-256(blob))`.
pub fn seal_blob<R: RngCore>(blob: &[u8], key: &Key256, rng: &mut R) -> Vec<u8> {
    let mut iv = [0u8; 16];
    rng.fill_bytes(&mut iv);
    let digest = Sha256::digest(blob);
    let mut ct = Vec::with_capacity(blob.len() + 32);
    ct.extend_from_slice(blob);
    ct.extend_from_slice(&digest);
    apply_ctr(key, &iv, &mut ct);

    let mut out = Vec::with_capacity(4 + 16 + 8 + ct.len());
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&iv);
    out.extend_from_slice(&(ct.len() as u64).to_le_bytes());
    out.extend_from_slice(&ct);
    out
}

/// Reverses [`seal_blob`], verifying the embedded digest.
pub fn unseal_blob(bundle: &[u8], key: &Key256) -> Result<Vec<u8>, SealError> {
    if bundle.len() < 4 + 16 + 8 + 32 {
        return Err(SealError::InvalidLength(bundle.len()));
    }
    let version = u32::from_le_bytes(bundle[..4].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(SealError::UnsupportedVersion(version));
    }
    let mut iv = [0u8; 16];
    iv.copy_from_slice(&bundle[4..20]);
    let ct_len = u64::from_le_bytes(bundle[20..28].try_into().unwrap()) as usize;
    if ct_len < 32 || bundle.len() != 28 + ct_len {
        return Err(SealError::InvalidLength(bundle.len()));
    }
    let mut buf = bundle[28..].to_vec();
    apply_ctr(key, &iv, &mut buf);
    let (blob, digest) = buf.split_at(ct_len - 32);
    if Sha256::digest(blob).as_slice() != digest {
        return Err(SealError::IntegrityFailure);
    }
    Ok(blob.to_vec())
}

/// Wraps every page key under the master key for synchronous transfer.
pub fn wrap_key_bundle<R: RngCore>(keys: &KeyArr, rng: &mut R) -> Vec<u8> {
    let mut blob = Vec::with_capacity(keys.page_keys.len() * 32);
    for k in &keys.page_keys {
        blob.extend_from_slice(k);
    }
    seal_blob(&blob, &keys.master_key, rng)
}

/// Recovers the page-key array from a wrapped bundle.
pub fn unwrap_key_bundle(bundle: &[u8], master_key: &Key256) -> Result<Vec<Key256>, SealError> {
    let blob = unseal_blob(bundle, master_key)?;
    if blob.len() % 32 != 0 {
        return Err(SealError::InvalidLength(blob.len()));
    }
    Ok(blob
        .chunks_exact(32)
        .map(|c| {
            let mut k = [0u8; 32];
            k.copy_from_slice(c);
            k
        })
        .collect())
}

/// Trusted master-key channel standing in for remote attestation.
///
/// The key can be fetched at most once per epoch, which is what defeats
/// forking: a second restored instance finds the channel drained and cannot
/// decrypt anything.
#[derive(Debug)]
pub struct KeyDeliveryChannel {
    key: Key256,
    delivered: bool,
}

impl KeyDeliveryChannel {
    pub fn new(key: Key256) -> Self {
        Self {
            key,
            delivered: false,
        }
    }

    pub fn delivered(&self) -> bool {
        self.delivered
    }

    /// Releases the master key; fails on every call after the first.
    pub fn deliver(&mut self) -> Result<Key256, SealError> {
        if self.delivered {
            return Err(SealError::AlreadyDelivered);
        }
        self.delivered = true;
        Ok(self.key)
    }
}

impl Drop for KeyDeliveryChannel {
    fn drop(&mut self) {
        self.key.fill(0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(0x5EA1)
    }

    #[test]
    fn key_counts() {
        let mut r = rng();
        let keys = KeyArr::generate(0, &mut r);
        assert_eq!(keys.num_pages(), 0);
        // 1 GiB heap worth of pages, computed from first principles.
        let pages = (1u64 << 30) / PAGE_SIZE as u64;
        assert_eq!(pages, 262_144);
    }

    #[test]
    fn master_keys_distinct_across_epochs() {
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let keys = KeyArr::generate(1, &mut r);
            assert!(seen.insert(*keys.master_key()));
        }
    }

    #[test]
    fn zero_page_round_trip() {
        let mut r = rng();
        let keys = KeyArr::generate(1, &mut r);
        let page = [0u8; PAGE_SIZE];
        let sealed = seal_page(0, &page, keys.page_key(0), &mut r);
        assert_eq!(sealed.ciphertext.len(), SEALED_PAGE_LEN);
        let back = unseal_page(&sealed, keys.page_key(0)).unwrap();
        assert_eq!(back.as_slice(), page.as_slice());
    }

    #[test]
    fn single_bit_flip_rejected() {
        let mut r = rng();
        let keys = KeyArr::generate(1, &mut r);
        let mut page = [0u8; PAGE_SIZE];
        r.fill_bytes(&mut page);
        let sealed = seal_page(0, &page, keys.page_key(0), &mut r);
        for trial in 0..64 {
            let mut tampered = sealed.clone();
            let bit = (trial * 991) % (SEALED_PAGE_LEN * 8);
            tampered.ciphertext[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(
                unseal_page(&tampered, keys.page_key(0)),
                Err(SealError::IntegrityFailure)
            );
        }
        // IV tampering must fail the same way.
        let mut tampered = sealed;
        tampered.iv[3] ^= 0x10;
        assert_eq!(
            unseal_page(&tampered, keys.page_key(0)),
            Err(SealError::IntegrityFailure)
        );
    }

    #[test]
    fn cross_key_unseal_rejected_exhaustively() {
        let mut r = rng();
        let keys = KeyArr::generate(4, &mut r);
        let mut pages = Vec::new();
        for i in 0..4u64 {
            let mut page = [0u8; PAGE_SIZE];
            r.fill_bytes(&mut page);
            pages.push(seal_page(i, &page, keys.page_key(i), &mut r));
        }
        for i in 0..4u64 {
            for j in 0..4u64 {
                let res = unseal_page(&pages[i as usize], keys.page_key(j));
                if i == j {
                    assert!(res.is_ok());
                } else {
                    assert_eq!(res, Err(SealError::IntegrityFailure));
                }
            }
        }
    }

    #[test]
    fn identical_pages_distinct_ciphertexts() {
        let mut r = rng();
        let keys = KeyArr::generate(2, &mut r);
        let page = [0x5Au8; PAGE_SIZE];
        let a = seal_page(0, &page, keys.page_key(0), &mut r);
        let b = seal_page(1, &page, keys.page_key(1), &mut r);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.iv, b.iv);
    }

    #[test]
    fn key_bundle_round_trip_and_tamper() {
        let mut r = rng();
        let keys = KeyArr::generate(7, &mut r);
        let bundle = wrap_key_bundle(&keys, &mut r);
        let back = unwrap_key_bundle(&bundle, keys.master_key()).unwrap();
        assert_eq!(back.as_slice(), keys.page_keys());

        let mut tampered = bundle.clone();
        let mid = tampered.len() / 2;
        tampered[mid] ^= 0x01;
        assert!(matches!(
            unwrap_key_bundle(&tampered, keys.master_key()),
            Err(SealError::IntegrityFailure) | Err(SealError::InvalidLength(_))
        ));

        let other = KeyArr::generate(7, &mut r);
        assert_eq!(
            unwrap_key_bundle(&bundle, other.master_key()),
            Err(SealError::IntegrityFailure)
        );
    }

    #[test]
    fn master_key_delivered_once() {
        let mut channel = KeyDeliveryChannel::new([9u8; 32]);
        assert_eq!(channel.deliver().unwrap(), [9u8; 32]);
        assert_eq!(channel.deliver(), Err(SealError::AlreadyDelivered));
        assert!(channel.delivered());
    }

    #[test]
    fn prior_epoch_page_rejected() {
        let mut r = rng();
        let old_epoch = KeyArr::generate(4, &mut r);
        let new_epoch = KeyArr::generate(4, &mut r);
        let page = [0x42u8; PAGE_SIZE];
        let replayed = seal_page(2, &page, old_epoch.page_key(2), &mut r);
        assert_eq!(
            unseal_page(&replayed, new_epoch.page_key(2)),
            Err(SealError::IntegrityFailure)
        );
    }

    #[test]
    fn blob_seal_round_trip() {
        let mut r = rng();
        let key = [3u8; 32];
        for len in [0usize, 1, 31, 32, 4096, 70_001] {
            let mut blob = vec![0u8; len];
            r.fill_bytes(&mut blob);
            let sealed = seal_blob(&blob, &key, &mut r);
            assert_eq!(unseal_blob(&sealed, &key).unwrap(), blob);
        }
    }
}
