//! Sliding-window request-rate limiter.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Caps requests per second across all threads sharing the limiter.
///
/// A caller blocks in [`acquire`](Self::acquire) until admitting its request
/// keeps every trailing one-second window at or under the ceiling.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: u32,
    admitted: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: u32) -> Self {
        Self {
            per_second: per_second.max(1),
            admitted: Mutex::new(VecDeque::new()),
        }
    }

    pub fn ceiling(&self) -> u32 {
        self.per_second
    }

    /// Block until a request slot is available, then claim it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut admitted = self.admitted.lock().expect("rate limiter poisoned");
                let now = Instant::now();
                while let Some(front) = admitted.front() {
                    if now.duration_since(*front) >= Duration::from_secs(1) {
                        admitted.pop_front();
                    } else {
                        break;
                    }
                }
                if admitted.len() < self.per_second as usize {
                    admitted.push_back(now);
                    return;
                }
                let oldest = *admitted.front().expect("non-empty at ceiling");
                Duration::from_secs(1).saturating_sub(now.duration_since(oldest))
            };
            std::thread::sleep(wait.max(Duration::from_millis(1)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn admits_up_to_ceiling_without_blocking() {
        let limiter = RateLimiter::new(5);
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(200));
    }

    #[test]
    fn no_one_second_window_exceeds_ceiling() {
        let limiter = Arc::new(RateLimiter::new(10));
        let timestamps = Arc::new(Mutex::new(Vec::new()));
        let mut handles = Vec::new();
        for _ in 0..4 {
            let limiter = Arc::clone(&limiter);
            let timestamps = Arc::clone(&timestamps);
            handles.push(std::thread::spawn(move || {
                for _ in 0..6 {
                    limiter.acquire();
                    timestamps.lock().unwrap().push(Instant::now());
                }
            }));
        }
        for handle in handles {
            handle.join().unwrap();
        }
        let mut stamps = timestamps.lock().unwrap().clone();
        stamps.sort();
        for (i, start) in stamps.iter().enumerate() {
            let in_window = stamps[i..]
                .iter()
                .take_while(|t| t.duration_since(*start) < Duration::from_secs(1))
                .count();
            assert!(in_window <= 10, "window starting at request {i} held {in_window}");
        }
    }
}
