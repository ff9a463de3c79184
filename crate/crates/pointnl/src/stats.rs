//! Per-thread instrumentation counters.
//!
//! Two statistics back the bench CLI:
//! - the pair-interaction counter, bumped once per (center, neighbor) term
//!   inside every non-local gather, and
//! - the matrix-buffer accountant, which tracks live bytes held by
//!   [`crate::mat::Mat`] allocations and their high-water mark.
//!
//! Counters are thread-local: every run of the pipeline is sequential, and
//! this keeps concurrently running tests from polluting each other.

use std::cell::Cell;

thread_local! {
    static INTERACTIONS: Cell<u64> = const { Cell::new(0) };
    static LIVE_BYTES: Cell<u64> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<u64> = const { Cell::new(0) };
}

/// Add `n` (center, neighbor) pair interactions to the running count.
#[inline]
pub fn count_interactions(n: u64) {
    INTERACTIONS.with(|c| c.set(c.get() + n));
}

/// Read the pair-interaction counter.
pub fn interactions() -> u64 {
    INTERACTIONS.with(|c| c.get())
}

/// Zero the pair-interaction counter.
pub fn reset_interactions() {
    INTERACTIONS.with(|c| c.set(0));
}

pub(crate) fn track_alloc(bytes: u64) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK_BYTES.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(crate) fn track_free(bytes: u64) {
    LIVE_BYTES.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live matrix buffers on this thread.
pub fn live_matrix_bytes() -> u64 {
    LIVE_BYTES.with(|c| c.get())
}

/// High-water mark of live matrix-buffer bytes since the last reset.
pub fn peak_matrix_bytes() -> u64 {
    PEAK_BYTES.with(|c| c.get())
}

/// Reset the high-water mark to the current live figure.
pub fn reset_peak_matrix_bytes() {
    PEAK_BYTES.with(|peak| peak.set(live_matrix_bytes()));
}
