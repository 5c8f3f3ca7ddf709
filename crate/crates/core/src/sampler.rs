//! Tripwire sampling: arm every short-granule allocation during slow start,
//! then arm one allocation after every `rand` allocations where `rand` is
//! drawn uniformly from `[1, 2 * sampling_rate]`.

use rand::Rng;
use serde::Serialize;

pub const DEFAULT_ALLOC_THRESHOLD: u64 = 1000;
pub const DEFAULT_SAMPLING_RATE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    SlowStart,
    Sampling,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SamplerConfig {
    /// Short-granule allocations armed unconditionally before sampling starts.
    /// `u64::MAX` keeps the sampler in slow start forever.
    pub alloc_threshold: u64,
    pub sampling_rate: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alloc_threshold: DEFAULT_ALLOC_THRESHOLD,
            sampling_rate: DEFAULT_SAMPLING_RATE,
        }
    }
}

impl SamplerConfig {
    pub fn always_arm() -> Self {
        SamplerConfig {
            alloc_threshold: u64::MAX,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TripwireSampler {
    config: SamplerConfig,
    phase: Phase,
    alloc_count: u64,
    countdown: u64,
}

impl TripwireSampler {
    pub fn new(config: SamplerConfig) -> Self {
        assert!(config.sampling_rate >= 1, "sampling rate must be at least 1");
        TripwireSampler {
            config,
            phase: Phase::SlowStart,
            alloc_count: 0,
            countdown: 0,
        }
    }

    pub fn config(&self) -> SamplerConfig {
        self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn alloc_count(&self) -> u64 {
        self.alloc_count
    }

    pub fn countdown(&self) -> u64 {
        self.countdown
    }

    fn draw_gap<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.gen_range(1..=2 * self.config.sampling_rate)
    }

    /// Called once per short-granule allocation, in allocation order.
    pub fn should_arm<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        if self.phase == Phase::SlowStart {
            if self.alloc_count < self.config.alloc_threshold {
                self.alloc_count += 1;
                return true;
            }
            self.phase = Phase::Sampling;
            self.countdown = self.draw_gap(rng);
        }
        self.countdown -= 1;
        if self.countdown == 0 {
            self.countdown = self.draw_gap(rng);
            true
        } else {
            false
        }
    }
}
