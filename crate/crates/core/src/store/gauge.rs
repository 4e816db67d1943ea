use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Counts live items and remembers the high-water mark.
#[derive(Debug, Clone, Default)]
pub struct Gauge {
    inner: Arc<(AtomicUsize, AtomicUsize)>,
}

impl Gauge {
    pub fn acquire(&self, n: usize) -> GaugeGuard {
        let now = self.inner.0.fetch_add(n, Ordering::SeqCst) + n;
        self.inner.1.fetch_max(now, Ordering::SeqCst);
        GaugeGuard {
            gauge: self.clone(),
            n,
        }
    }

    pub fn current(&self) -> usize {
        self.inner.0.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.inner.1.load(Ordering::SeqCst)
    }
}

#[derive(Debug)]
pub struct GaugeGuard {
    gauge: Gauge,
    n: usize,
}

impl Drop for GaugeGuard {
    fn drop(&mut self) {
        self.gauge.inner.0.fetch_sub(self.n, Ordering::SeqCst);
    }
}
