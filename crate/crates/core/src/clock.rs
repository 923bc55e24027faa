//! Monotonic and wall clocks in microseconds, plus a simulated clock for
//! lockstep runs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// Process-wide monotonic time in µs.
pub fn mono_us() -> u64 {
    epoch().elapsed().as_micros() as u64
}

/// Wall-clock time since the Unix epoch in µs.
pub fn wall_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

pub trait Clock: Send + Sync {
    fn now_us(&self) -> u64;
    fn sleep_until(&self, t_us: u64);
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MonotonicClock;

impl Clock for MonotonicClock {
    fn now_us(&self) -> u64 {
        mono_us()
    }

    fn sleep_until(&self, t_us: u64) {
        loop {
            let now = mono_us();
            if now >= t_us {
                return;
            }
            let remaining = t_us - now;
            // Coarse sleep, then spin out the last few hundred µs.
            if remaining > 1_500 {
                std::thread::sleep(Duration::from_micros(remaining - 1_000));
            } else {
                std::thread::yield_now();
            }
        }
    }
}

/// Clock that only moves when told to; `sleep_until` jumps forward.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    now: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new(start_us: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_us)),
        }
    }

    pub fn advance(&self, dt_us: u64) {
        self.now.fetch_add(dt_us, Ordering::SeqCst);
    }

    pub fn set(&self, t_us: u64) {
        self.now.store(t_us, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_us(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, t_us: u64) {
        self.now.fetch_max(t_us, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_sleep_reaches_target() {
        let c = MonotonicClock;
        let target = c.now_us() + 3_000;
        c.sleep_until(target);
        assert!(c.now_us() >= target);
    }

    #[test]
    fn sim_clock_never_goes_back() {
        let c = SimClock::new(100);
        c.sleep_until(50);
        assert_eq!(c.now_us(), 100);
        c.sleep_until(250);
        assert_eq!(c.now_us(), 250);
    }
}
