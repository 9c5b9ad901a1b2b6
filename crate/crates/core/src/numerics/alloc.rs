//! High-water-mark accounting for tensor buffers.
//!
//! Every tensor buffer charges its byte size to the tracker that is current on
//! the allocating thread, and refunds the same tracker when it is dropped.
//! Independent jobs install their own tracker with [`AllocTracker::scope`].

use std::cell::RefCell;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
}

#[derive(Debug, Clone, Default)]
pub struct AllocTracker {
    inner: Arc<Counters>,
}

thread_local! {
    static CURRENT: RefCell<AllocTracker> = RefCell::new(AllocTracker::default());
}

impl AllocTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tracker in effect on this thread.
    pub fn current() -> Self {
        CURRENT.with(|c| c.borrow().clone())
    }

    /// Runs `f` with `self` installed as this thread's tracker.
    pub fn scope<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = CURRENT.with(|c| c.replace(self.clone()));
        struct Restore(Option<AllocTracker>);
        impl Drop for Restore {
            fn drop(&mut self) {
                if let Some(prev) = self.0.take() {
                    CURRENT.with(|c| *c.borrow_mut() = prev);
                }
            }
        }
        let _restore = Restore(Some(prev));
        f()
    }

    pub fn current_bytes(&self) -> usize {
        self.inner.current.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.inner.peak.load(Ordering::Relaxed)
    }

    /// Resets the high-water mark to the bytes live right now.
    pub fn reset_peak(&self) {
        let now = self.current_bytes();
        self.inner.peak.store(now, Ordering::Relaxed);
    }

    pub(crate) fn charge(&self, bytes: usize) {
        let now = self.inner.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.inner.peak.fetch_max(now, Ordering::Relaxed);
    }

    pub(crate) fn refund(&self, bytes: usize) {
        self.inner.current.fetch_sub(bytes, Ordering::Relaxed);
    }
}
