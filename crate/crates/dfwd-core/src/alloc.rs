//! Heap-tracking allocator wrapper for peak-memory measurements.
//!
//! Binaries that want measured peaks install it as the global allocator:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: dfwd_core::alloc::TrackingAllocator = dfwd_core::alloc::TrackingAllocator;
//! ```
//!
//! Tracking is process-wide and always-on but costs only two relaxed
//! atomics per allocation. When the tracker is not installed,
//! [`measured_peaks_available`] reports false and profiling falls back to
//! analytic counts only.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct TrackingAllocator;

impl TrackingAllocator {
    fn record_alloc(size: usize) {
        INSTALLED.store(true, Ordering::Relaxed);
        let live = LIVE_BYTES.fetch_add(size, Ordering::Relaxed) + size;
        PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
    }

    fn record_dealloc(size: usize) {
        LIVE_BYTES.fetch_sub(size, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            Self::record_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        Self::record_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            Self::record_dealloc(layout.size());
            Self::record_alloc(new_size);
        }
        p
    }
}

/// True when the tracking allocator has observed at least one allocation —
/// i.e. it is installed as the global allocator in this process.
pub fn measured_peaks_available() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Currently live heap bytes (0 if the tracker is not installed).
pub fn live_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

/// Reset the peak high-water mark to the current live size and return the
/// previous peak.
pub fn reset_peak() -> usize {
    PEAK_BYTES.swap(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed)
}

/// Peak live heap bytes since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}
