// SPDX-License-Identifier: Apache-2.0

//! Stop-and-copy baseline: freeze, seal everything, ship everything, restore
//! everything, resume. Downtime covers the whole sequence, so it grows
//! linearly with the heap.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::enclave::{create_enclave, EnclaveConfig, PAGE_SIZE};
use crate::event::{EventKind, EventLog};
use crate::optmgr::OptMgr;
use crate::seal::{seal_page, unseal_page, KeyArr, KeyDeliveryChannel, SealedPage};
use crate::transport::{Direction, Frame, LinkModel, SimLink};

use super::bitvec::{BitRole, BitVector};
use super::layout::{order_layout, Layout, Placement};
use super::report::{MigrationReport, Protocol};
use super::{MigrateError, SimCosts};

pub struct StopCopyOutcome {
    pub report: MigrationReport,
    pub log: EventLog,
    /// Drained source runtime.
    pub source: OptMgr,
    /// Running destination runtime with the restored state.
    pub dest: OptMgr,
}

fn jittered(base: u64, jitter: f64, rng: &mut ChaCha12Rng) -> u64 {
    if jitter <= 0.0 {
        return base;
    }
    let f = 1.0 + rng.gen_range(0.0..jitter);
    (base as f64 * f) as u64
}

/// Runs a stop-and-copy migration of `source` onto a fresh enclave built
/// from `dest_config`, starting at virtual time `start_ns`.
pub fn run_stop_and_copy(
    mut source: OptMgr,
    dest_config: EnclaveConfig,
    link_model: LinkModel,
    costs: SimCosts,
    rng: &mut ChaCha12Rng,
    start_ns: u64,
) -> Result<StopCopyOutcome, MigrateError> {
    let mut link = SimLink::new(link_model);
    let mut log = EventLog::new();
    let mut report = MigrationReport::new(Protocol::StopAndCopy);
    report.start_ns = start_ns;
    let mut t = start_ns;

    log.push(t, EventKind::MigrationStart);
    log.push(t, EventKind::PauseIssued);
    source.enclave_mut().pause()?;
    t += costs.pause_ns;
    log.push(t, EventKind::PauseComplete);
    report.pause_ns = t;
    let pause_done = t;

    source.enclave_mut().begin_save()?;
    log.push(t, EventKind::SaveSignal);

    // Everything is sealed under pause; a failure from here on rolls the
    // source back untouched.
    let result = (|| -> Result<(OptMgr, u64), MigrateError> {
        let ids = order_layout(source.memarr(), Placement::Naive);
        let layout = Layout::build(source.memarr(), &ids);
        let num_slots = layout.num_slots();
        report.heap_pages = num_slots;

        let keys = KeyArr::generate(num_slots, rng);
        log.push(t, EventKind::KeysGenerated { pages: num_slots });
        let save_vec = BitVector::new(BitRole::SaveVec, num_slots);

        let mut sealed: Vec<SealedPage> = Vec::with_capacity(num_slots as usize);
        for slot in 0..num_slots {
            t += jittered(costs.seal_ns_per_page, costs.jitter, rng);
            let heap_page = layout.slot(slot).heap_page;
            let bytes: &[u8; PAGE_SIZE] = source
                .enclave()
                .page_bytes(heap_page)?
                .try_into()
                .expect("page frame size");
            sealed.push(seal_page(slot, bytes, keys.page_key(slot), rng));
            save_vec.set(slot);
            log.push(t, EventKind::SaveVecSet { page: slot });
        }

        let metadata = source.serialize_metadata(&ids);
        let sealed_meta = crate::seal::seal_blob(&metadata, keys.master_key(), rng);
        let bundle = crate::seal::wrap_key_bundle(&keys, rng);
        let save_done = t;
        report.phases.save_ns = save_done - pause_done;

        // Synchronous transfer of every frame.
        let transfer_start = t;
        let hello = Frame::Hello {
            payload: vec![crate::transport::PROTOCOL_VERSION],
        };
        link.charge(Direction::SourceToDest, t, hello.wire_len())?;
        let bundle_frame = Frame::KeyBundle { bundle };
        link.charge(Direction::SourceToDest, t, bundle_frame.wire_len())?;
        let mbuff_frame = Frame::MBuff {
            blob: sealed_meta.clone(),
        };
        let (_, mbuff_arrive) = link.charge(Direction::SourceToDest, t, mbuff_frame.wire_len())?;
        log.push(mbuff_arrive, EventKind::MbuffSent {
            bytes: mbuff_frame.wire_len(),
        });

        let mut arrivals = Vec::with_capacity(num_slots as usize);
        let mut last_arrival = mbuff_arrive;
        for (slot, page) in sealed.iter().enumerate() {
            let frame_len = Frame::Page { page: page.clone() }.wire_len();
            let (depart, arrive) = link.charge(Direction::SourceToDest, t, frame_len)?;
            log.push(depart, EventKind::PageSent {
                page: slot as u64,
                bytes: frame_len,
            });
            arrivals.push(arrive);
            last_arrival = arrive;
        }
        for (slot, arrive) in arrivals.iter().enumerate() {
            log.push(*arrive, EventKind::PageReceived { page: slot as u64 });
        }
        t = last_arrival;
        report.phases.transfer_ns = t - transfer_start;

        // Fresh enclave on the destination, then restore under the master
        // key delivered once.
        let mut dest_enclave = create_enclave(dest_config)?;
        log.push(t, EventKind::EnclaveInitStart {
            committed_pages: dest_config.committed_pages(),
        });
        t += dest_enclave.init_time_ns();
        log.push(t, EventKind::EnclaveInitDone);
        report.phases.init_ns = dest_enclave.init_time_ns();
        let restore_start = t;

        dest_enclave.begin_restore()?;
        let mut dest = OptMgr::new(dest_enclave, 0, 0);

        let mut channel = KeyDeliveryChannel::new(*keys.master_key());
        let master = channel.deliver()?;
        t += costs.key_delivery_ns;
        log.push(t, EventKind::MasterKeyDelivered);
        let page_keys = crate::seal::unwrap_key_bundle(
            &crate::seal::wrap_key_bundle(&keys, rng),
            &master,
        )?;

        let meta_plain = crate::seal::unseal_blob(&sealed_meta, &master)?;
        dest.restore_metadata(&meta_plain)?;
        t += costs.metadata_restore_ns;
        log.push(t, EventKind::MbuffRestored);

        let restore_vec = BitVector::new(BitRole::RestoreVec, num_slots);
        for (slot, page) in sealed.into_iter().enumerate() {
            t += jittered(costs.restore_ns_per_page, costs.jitter, rng);
            let plain = unseal_page(&page, &page_keys[slot])?;
            let heap_page = layout.slot(slot as u64).heap_page;
            dest.enclave_mut().write_page(heap_page, &plain)?;
            restore_vec.set(slot as u64);
            log.push(t, EventKind::RestoreVecSet { page: slot as u64 });
        }
        report.phases.restore_ns = t - restore_start;

        dest.enclave_mut().resume()?;
        log.push(t, EventKind::Resume);
        Ok((dest, t))
    })();

    let (dest, resume_t) = match result {
        Ok(v) => v,
        Err(e) => {
            // Rollback: the master key never usably left, the source resumes.
            source.enclave_mut().rollback_to_running()?;
            return Err(MigrateError::Aborted {
                reason: e.to_string(),
                rolled_back: true,
            });
        }
    };

    t = resume_t;
    report.resume_ns = t;
    report.downtime_ns = t - report.pause_ns;

    // Success: retire the source.
    source.clear_regions();
    source.enclave_mut().teardown()?;
    log.push(t, EventKind::SourceTeardown);
    log.push(t, EventKind::MigrationComplete);
    report.end_ns = t;
    report.migration_time_ns = t - start_ns;
    report.bytes_transferred = link.total_bytes();

    Ok(StopCopyOutcome {
        report,
        log,
        source,
        dest,
    })
}
