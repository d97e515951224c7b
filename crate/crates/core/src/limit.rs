use std::sync::{Condvar, Mutex};

/// Counting gate bounding concurrent calls to a backend.
#[derive(Debug)]
pub(crate) struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub(crate) fn new(max: usize) -> Self {
        InFlightLimiter { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub(crate) fn max(&self) -> usize {
        self.max
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}
