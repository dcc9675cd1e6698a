//! Hard cap on the bytes dense (UDF-centric) operators may hold at once.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct MemoryGovernor {
    cap: Option<u64>,
    used: AtomicU64,
}

impl MemoryGovernor {
    pub fn new(cap: Option<u64>) -> Self {
        MemoryGovernor {
            cap,
            used: AtomicU64::new(0),
        }
    }

    pub fn cap(&self) -> Option<u64> {
        self.cap
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    /// Reserves `bytes` for the lifetime of the returned guard, failing
    /// before anything is allocated if the cap would be exceeded.
    pub fn reserve(&self, bytes: u64, what: &str) -> Result<Reservation<'_>> {
        let mut cur = self.used.load(Ordering::SeqCst);
        loop {
            let next = cur.saturating_add(bytes);
            if let Some(cap) = self.cap {
                if next > cap {
                    return Err(Error::Capacity(format!(
                        "{what} needs {bytes} bytes but only {} of the {cap}-byte dense allocation cap remain",
                        cap.saturating_sub(cur)
                    )));
                }
            }
            match self
                .used
                .compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return Ok(Reservation { gov: self, bytes }),
                Err(actual) => cur = actual,
            }
        }
    }
}

#[must_use]
pub struct Reservation<'a> {
    gov: &'a MemoryGovernor,
    bytes: u64,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.gov.used.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reservations_respect_cap() {
        let gov = MemoryGovernor::new(Some(100));
        let a = gov.reserve(60, "a").unwrap();
        assert!(matches!(gov.reserve(50, "b"), Err(Error::Capacity(_))));
        drop(a);
        let _b = gov.reserve(100, "b").unwrap();
        assert_eq!(gov.used(), 100);
        let unbounded = MemoryGovernor::new(None);
        assert!(unbounded.reserve(u64::MAX, "big").is_ok());
    }
}
