//! Per-key token buckets.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::auth::{ApiKeyRecord, KeyStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Allow,
    Deny { retry_after: Duration },
}

#[derive(Debug)]
struct Bucket {
    capacity: f64,
    refill_per_sec: f64,
    tokens: f64,
    last: Instant,
}

impl Bucket {
    fn take(&mut self, now: Instant) -> Decision {
        let elapsed = now.saturating_duration_since(self.last).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        self.last = self.last.max(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Decision::Allow
        } else {
            let wait = (1.0 - self.tokens) / self.refill_per_sec;
            Decision::Deny { retry_after: Duration::from_secs_f64(wait) }
        }
    }
}

/// One bucket per key, each behind its own lock.
#[derive(Debug)]
pub struct RateLimiter {
    buckets: HashMap<String, Mutex<Bucket>>,
}

impl RateLimiter {
    pub fn new(keys: &KeyStore) -> Self {
        Self::at(keys, Instant::now())
    }

    pub fn at(keys: &KeyStore, start: Instant) -> Self {
        let buckets = keys
            .records()
            .map(|r| {
                let b = Bucket {
                    capacity: f64::from(r.burst),
                    refill_per_sec: r.requests_per_second,
                    tokens: f64::from(r.burst),
                    last: start,
                };
                (r.id.clone(), Mutex::new(b))
            })
            .collect();
        Self { buckets }
    }

    pub fn check(&self, key: &ApiKeyRecord) -> Decision {
        self.check_at(key, Instant::now())
    }

    pub fn check_at(&self, key: &ApiKeyRecord, now: Instant) -> Decision {
        match self.buckets.get(&key.id) {
            Some(b) => b.lock().take(now),
            // Keys are fixed at startup; an unknown id never reaches here
            // through the gateway.
            None => Decision::Deny { retry_after: Duration::from_secs(1) },
        }
    }
}
