//! Process-global tensor-allocation accounting.
//!
//! The benchmark measures auxiliary-tensor cost per loss kernel in units of
//! whole-tensor allocations. Accounting is scoped: [`start`] opens a recording
//! region bound to the calling thread, every [`Tensor`](crate::tensor::Tensor)
//! constructed on that thread is counted until [`stop`] returns the totals.
//! Scalars and non-tensor buffers are exempt by design. Only one region may be
//! open at a time; benchmarks are single-threaded by contract.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::error::{Error, Result};

static ACTIVE: AtomicBool = AtomicBool::new(false);
static OWNER: AtomicU64 = AtomicU64::new(0);
static GENERATION: AtomicU64 = AtomicU64::new(0);

static LIVE_BYTES: AtomicU64 = AtomicU64::new(0);
static PEAK_BYTES: AtomicU64 = AtomicU64::new(0);
static TEMP_COUNT: AtomicU64 = AtomicU64::new(0);
static TEMP_BYTES: AtomicU64 = AtomicU64::new(0);

fn thread_token() -> u64 {
    // Address of a thread-local is stable for the thread's lifetime.
    thread_local! {
        static TOKEN: u8 = 0;
    }
    TOKEN.with(|t| t as *const u8 as u64)
}

/// Snapshot of the counters for one recording region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Bytes of region-allocated tensors still alive.
    pub live_bytes: u64,
    /// High-water mark of `live_bytes` within the region.
    pub peak_bytes: u64,
    /// Number of tensor allocations in the region.
    pub temp_tensor_count: u64,
    /// Total bytes allocated in the region (cumulative, frees not subtracted).
    pub temp_bytes: u64,
}

/// Open a recording region on the current thread.
///
/// Errors with [`Error::BenchBusy`] if a region is already open anywhere in
/// the process.
pub fn start() -> Result<()> {
    if ACTIVE
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(Error::BenchBusy);
    }
    OWNER.store(thread_token(), Ordering::SeqCst);
    LIVE_BYTES.store(0, Ordering::SeqCst);
    PEAK_BYTES.store(0, Ordering::SeqCst);
    TEMP_COUNT.store(0, Ordering::SeqCst);
    TEMP_BYTES.store(0, Ordering::SeqCst);
    Ok(())
}

/// Close the current recording region and return its totals.
pub fn stop() -> AllocStats {
    let stats = snapshot();
    GENERATION.fetch_add(1, Ordering::SeqCst);
    ACTIVE.store(false, Ordering::SeqCst);
    stats
}

/// Read the counters without closing the region.
pub fn snapshot() -> AllocStats {
    AllocStats {
        live_bytes: LIVE_BYTES.load(Ordering::SeqCst),
        peak_bytes: PEAK_BYTES.load(Ordering::SeqCst),
        temp_tensor_count: TEMP_COUNT.load(Ordering::SeqCst),
        temp_bytes: TEMP_BYTES.load(Ordering::SeqCst),
    }
}

/// Called by the tensor constructor. Returns a drop ticket: the generation of
/// the region that counted this allocation, or 0 if it was not counted.
pub(crate) fn on_alloc(bytes: usize) -> u64 {
    if !ACTIVE.load(Ordering::Relaxed) || OWNER.load(Ordering::Relaxed) != thread_token() {
        return 0;
    }
    let bytes = bytes as u64;
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::SeqCst) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::SeqCst);
    TEMP_COUNT.fetch_add(1, Ordering::SeqCst);
    TEMP_BYTES.fetch_add(bytes, Ordering::SeqCst);
    GENERATION.load(Ordering::SeqCst) + 1
}

/// Called on tensor drop with the ticket from `on_alloc`.
pub(crate) fn on_free(ticket: u64, bytes: usize) {
    if ticket == 0 {
        return;
    }
    // Only decrement if the region that counted the allocation is still open.
    if ACTIVE.load(Ordering::SeqCst) && GENERATION.load(Ordering::SeqCst) + 1 == ticket {
        LIVE_BYTES.fetch_sub(bytes as u64, Ordering::SeqCst);
    }
}
