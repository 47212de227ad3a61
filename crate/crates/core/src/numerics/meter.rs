//! Logical allocation accounting and scalar multiply counting.
//!
//! Every tensor buffer acquisition and release on the current thread passes
//! through the allocation meter, so peak activation memory can be measured
//! without OS-level tooling. Counters are thread-local: a meter observes only
//! the tensors created on its own thread.
//!
//! The multiply counter tallies scalar multiplications performed by the
//! kernels in [`ops`](super::ops). A fused multiply-add counts once.

use std::cell::Cell;

use crate::error::{Error, Result};

/// Snapshot of the allocation counters, in bytes.
///
/// `current_bytes` and `peak_bytes` are relative to the last [`reset`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocationMeter {
    pub current_bytes: usize,
    pub peak_bytes: usize,
    pub total_allocated_bytes: usize,
}

#[derive(Default)]
struct MeterState {
    live: Cell<usize>,
    baseline: Cell<usize>,
    peak: Cell<usize>,
    total: Cell<usize>,
    limit: Cell<Option<usize>>,
    macs: Cell<u64>,
}

thread_local! {
    static STATE: MeterState = MeterState::default();
}

pub(crate) fn acquire(bytes: usize) -> Result<()> {
    STATE.with(|s| {
        let live = s.live.get();
        if let Some(limit) = s.limit.get() {
            if live + bytes > limit {
                return Err(Error::OutOfMemory {
                    requested: bytes,
                    live,
                    limit,
                });
            }
        }
        let live = live + bytes;
        s.live.set(live);
        s.total.set(s.total.get() + bytes);
        if live > s.peak.get() {
            s.peak.set(live);
        }
        Ok(())
    })
}

pub(crate) fn release(bytes: usize) {
    STATE.with(|s| s.live.set(s.live.get().saturating_sub(bytes)));
}

/// Current counters for this thread.
pub fn snapshot() -> AllocationMeter {
    STATE.with(|s| {
        let base = s.baseline.get();
        AllocationMeter {
            current_bytes: s.live.get().saturating_sub(base),
            peak_bytes: s.peak.get().saturating_sub(base),
            total_allocated_bytes: s.total.get(),
        }
    })
}

/// Zero all counters. Buffers alive at this point become the new baseline.
pub fn reset() {
    STATE.with(|s| {
        let live = s.live.get();
        s.baseline.set(live);
        s.peak.set(live);
        s.total.set(0);
    });
}

/// Absolute number of live tensor bytes on this thread, ignoring the baseline.
pub fn live_bytes() -> usize {
    STATE.with(|s| s.live.get())
}

/// Cap on absolute live bytes; acquisitions beyond it fail with
/// [`Error::OutOfMemory`]. `None` removes the cap.
pub fn set_limit(limit: Option<usize>) {
    STATE.with(|s| s.limit.set(limit));
}

pub(crate) fn count_macs(n: usize) {
    STATE.with(|s| s.macs.set(s.macs.get() + n as u64));
}

/// Scalar multiplications counted on this thread since the last [`reset_macs`].
pub fn macs() -> u64 {
    STATE.with(|s| s.macs.get())
}

pub fn reset_macs() {
    STATE.with(|s| s.macs.set(0));
}
