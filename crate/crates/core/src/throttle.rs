//! Byte-rate token bucket used to emulate constrained links.

/// Token bucket over an abstract clock in seconds. Starts empty, so a zero
/// rate admits nothing.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    tokens: f64,
    last: f64,
}

impl TokenBucket {
    pub fn new(bytes_per_sec: f64) -> Self {
        TokenBucket {
            rate: bytes_per_sec.max(0.0),
            tokens: 0.0,
            last: 0.0,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    fn refill(&mut self, now: f64, capacity: f64) {
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) * self.rate).min(capacity);
            self.last = now;
        }
    }

    /// Tries to admit `size` bytes with burst capacity `capacity`. Returns
    /// the time the bytes may go out: `now` if already covered, a later
    /// instant strictly before `deadline` if the bucket will fill by then,
    /// or `None` (nothing consumed) if it cannot.
    pub fn admit(&mut self, now: f64, size: f64, capacity: f64, deadline: f64) -> Option<f64> {
        self.refill(now, capacity);
        if self.tokens >= size {
            self.tokens -= size;
            return Some(now);
        }
        if self.rate <= 0.0 || size > capacity {
            return None;
        }
        let ready = now.max(self.last) + (size - self.tokens) / self.rate;
        if ready < deadline {
            self.tokens = 0.0;
            self.last = ready;
            Some(ready)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frames offered at `fps` for `seconds` against `budget` bytes/s;
    /// returns how many were admitted.
    fn simulate(fps: f64, seconds: f64, frame: f64, budget: f64) -> u64 {
        let mut bucket = TokenBucket::new(budget);
        let ticks = (fps * seconds) as u64;
        let mut admitted = 0;
        let mut clock = 0.0f64;
        for i in 0..ticks {
            let tick = i as f64 / fps;
            let now = clock.max(tick);
            if let Some(at) = bucket.admit(now, frame, 2.0 * frame, (i + 1) as f64 / fps) {
                clock = at;
                admitted += 1;
            }
        }
        admitted
    }

    #[test]
    fn zero_budget_admits_nothing() {
        assert_eq!(simulate(30.0, 2.0, 1000.0, 0.0), 0);
    }

    #[test]
    fn binding_budget_tracks_rate() {
        for (budget_frames, expected) in [(15.0, 15.0), (6.6667, 6.6667), (3.0, 3.0), (29.0, 29.0)]
        {
            let fps = simulate(30.0, 10.0, 1000.0, budget_frames * 1000.0) as f64 / 10.0;
            assert!(
                (fps - expected).abs() / expected < 0.05,
                "{budget_frames}: {fps}"
            );
        }
    }

    #[test]
    fn ample_budget_is_unconstrained() {
        assert!(simulate(30.0, 10.0, 1000.0, 60_000.0) >= 299);
        assert!(simulate(30.0, 10.0, 1000.0, 300_000.0) >= 299);
    }

    #[test]
    fn waits_within_deadline() {
        let mut b = TokenBucket::new(100.0);
        assert_eq!(b.admit(0.0, 50.0, 100.0, 0.4), None);
        let at = b.admit(0.0, 50.0, 100.0, 0.6).unwrap();
        assert!((at - 0.5).abs() < 1e-12);
        assert_eq!(b.tokens(), 0.0);
    }
}
