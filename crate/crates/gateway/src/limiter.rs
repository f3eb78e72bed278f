use std::collections::VecDeque;
use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Sliding-window limiter: at most `max_requests` grants in any window.
///
/// Waiters are served in lock-acquisition order; nothing is dropped.
#[derive(Debug)]
pub struct RateLimiter {
    max_requests: usize,
    window: Duration,
    grants: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(max_requests: usize, window: Duration) -> Self {
        assert!(max_requests > 0, "rate limit must allow at least one request");
        RateLimiter {
            max_requests,
            window,
            grants: Mutex::new(VecDeque::with_capacity(max_requests)),
        }
    }

    pub fn per_minute(max_requests: usize) -> Self {
        Self::new(max_requests, Duration::from_secs(60))
    }

    pub fn max_requests(&self) -> usize {
        self.max_requests
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    /// Waits until a request may be sent and records the grant.
    pub async fn acquire(&self) {
        // Holding the lock across the sleep keeps grants in FIFO order.
        let mut grants = self.grants.lock().await;
        loop {
            let now = Instant::now();
            while grants.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                grants.pop_front();
            }
            if grants.len() < self.max_requests {
                grants.push_back(now);
                return;
            }
            let oldest = *grants.front().expect("full window has a front");
            tokio::time::sleep_until(oldest + self.window).await;
        }
    }
}
