//! Bulkheads and circuit breakers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::runtime::SimTime;
use super::topology::CircuitBreakerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bulkhead {
    size: u32,
    active: u32,
}

impl Bulkhead {
    pub fn new(size: u32) -> Self {
        Self { size, active: 0 }
    }

    pub fn try_acquire(&mut self) -> bool {
        if self.active < self.size {
            self.active += 1;
            true
        } else {
            false
        }
    }

    pub fn release(&mut self) {
        debug_assert!(self.active > 0, "release without acquire");
        self.active = self.active.saturating_sub(1);
    }

    pub fn active(&self) -> u32 {
        self.active
    }

    pub fn size(&self) -> u32 {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreakerState {
    Closed,
    Open,
    HalfOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Allowed,
    /// The single probe let through while half-open.
    Trial,
    ShortCircuited,
}

#[derive(Debug, Clone)]
pub struct CircuitBreaker {
    spec: CircuitBreakerSpec,
    state: BreakerState,
    open_until: SimTime,
    trial_in_flight: bool,
    window: VecDeque<(SimTime, bool)>,
    errors: u32,
}

impl CircuitBreaker {
    pub fn new(spec: CircuitBreakerSpec) -> Self {
        Self {
            spec,
            state: BreakerState::Closed,
            open_until: SimTime::ZERO,
            trial_in_flight: false,
            window: VecDeque::new(),
            errors: 0,
        }
    }

    pub fn state(&self) -> BreakerState {
        self.state
    }

    pub fn admit(&mut self, now: SimTime) -> Admission {
        match self.state {
            BreakerState::Closed => Admission::Allowed,
            BreakerState::Open if now < self.open_until => Admission::ShortCircuited,
            BreakerState::Open => {
                self.state = BreakerState::HalfOpen;
                self.trial_in_flight = true;
                Admission::Trial
            }
            BreakerState::HalfOpen if self.trial_in_flight => Admission::ShortCircuited,
            BreakerState::HalfOpen => {
                self.trial_in_flight = true;
                Admission::Trial
            }
        }
    }

    /// Records a completed execution. Rejections and timeouts count as
    /// errors; short-circuits are never recorded.
    pub fn record(&mut self, now: SimTime, success: bool, admission: Admission) {
        if admission == Admission::Trial {
            self.trial_in_flight = false;
            if success {
                self.state = BreakerState::Closed;
                self.window.clear();
                self.errors = 0;
            } else {
                self.trip(now);
            }
            return;
        }
        if self.state != BreakerState::Closed {
            return;
        }
        self.window.push_back((now, success));
        if !success {
            self.errors += 1;
        }
        let horizon = now.saturating_sub(SimTime::from_ms(self.spec.window_ms));
        while let Some(&(t, ok)) = self.window.front() {
            if t >= horizon {
                break;
            }
            self.window.pop_front();
            if !ok {
                self.errors -= 1;
            }
        }
        let n = self.window.len() as f64;
        if self.window.len() as u32 >= self.spec.request_volume_threshold
            && f64::from(self.errors) * 100.0 >= self.spec.error_threshold_pct * n
            && self.errors > 0
        {
            self.trip(now);
        }
    }

    fn trip(&mut self, now: SimTime) {
        self.state = BreakerState::Open;
        self.open_until = now + SimTime::from_ms(self.spec.cooldown_ms);
        self.window.clear();
        self.errors = 0;
    }
}
