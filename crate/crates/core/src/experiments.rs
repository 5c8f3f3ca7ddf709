//! Statistical experiments over generated corpora.
//!
//! Every trial owns its machine, memory, allocator and detector, and draws
//! its randomness from `trial_seed(seed, index)`, so results do not depend
//! on how rayon schedules the trials.

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::allocator::{generate_tag, AllocState, Allocator, AllocatorConfig, TagSet, TripwireState};
use crate::cpu::Mode;
use crate::isa::Program;
use crate::memory::TaggedMemory;
use crate::rng::{substream, trial_seed, GENERATOR_STREAM};
use crate::sampler::SamplerConfig;
use crate::sim::{SimConfig, SimError, Simulator, StepOutcome};
use crate::workload::{generate_one, validate_spec, SizeWeight, WorkloadError, WorkloadSpec};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    // Rounding can push an endpoint just past the point estimate at p = 0 or 1.
    ((center - half).clamp(0.0, 1.0).min(p), (center + half).clamp(0.0, 1.0).max(p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub trials: u64,
    pub detected: u64,
    pub rate: f64,
    pub wilson_95_ci: (f64, f64),
    pub config_echo: Value,
}

impl ExperimentResult {
    pub fn new(name: impl Into<String>, trials: u64, detected: u64, config_echo: Value) -> Self {
        let rate = if trials == 0 { 0.0 } else { detected as f64 / trials as f64 };
        ExperimentResult {
            name: name.into(),
            trials,
            detected,
            rate,
            wilson_95_ci: wilson_interval(detected, trials, Z_95),
            config_echo,
        }
    }

    pub fn ci_contains(&self, p: f64) -> bool {
        self.wilson_95_ci.0 <= p && p <= self.wilson_95_ci.1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("experiment result serializes")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExperimentError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("trial {trial}: {source}")]
    Sim { trial: u64, source: SimError },
    #[error("{0}")]
    Invalid(String),
}

/// Runs `trials` generated programs of the workload's kind and counts how
/// many end in a bug report.
pub fn exp_detection_rate(
    workload: &WorkloadSpec,
    config: &SimConfig,
    trials: u64,
    seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    let spec = WorkloadSpec {
        count: trials as usize,
        seed,
        ..workload.clone()
    };
    validate_spec(&spec)?;
    let outcomes: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let program = generate_one(&spec, i)?;
            let cfg = SimConfig {
                seed: trial_seed(seed, i),
                ..*config
            };
            let mut sim = Simulator::new(program, cfg);
            let done = sim.run_to_end().map_err(|source| ExperimentError::Sim { trial: i, source })?;
            Ok(matches!(done, StepOutcome::BugReported(_)))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let detected = outcomes.iter().filter(|&&d| d).count() as u64;
    let echo = json!({ "workload": spec, "sim": config, "seed": seed });
    Ok(ExperimentResult::new(format!("detection_rate/{}", spec.kind), trials, detected, echo))
}

/// Fraction of `n` sizes drawn from the distribution that leave a short
/// granule.
pub fn exp_vulnerable_fraction(dist: &[SizeWeight], n: u64, seed: u64) -> Result<ExperimentResult, ExperimentError> {
    if n == 0 {
        return Err(ExperimentError::Invalid("need at least one draw".into()));
    }
    let index = WeightedIndex::new(dist.iter().map(|s| s.weight)).map_err(|_| WorkloadError::BadWeights)?;
    let mut rng = substream(seed, GENERATOR_STREAM);
    let vulnerable = (0..n).filter(|_| !dist[index.sample(&mut rng)].size.is_multiple_of(16)).count() as u64;
    let echo = json!({ "size_classes": dist.len(), "seed": seed });
    Ok(ExperimentResult::new("vulnerable_fraction", n, vulnerable, echo))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollisionSetup {
    /// Admit tag 0, giving the full 16-tag space.
    pub allow_zero_tag: bool,
    pub exclude: TagSet,
}

/// Draws pairs of independent tags from the allocator's generator and
/// counts equal pairs.
pub fn exp_collision_rate(setup: CollisionSetup, trials: u64, seed: u64) -> Result<ExperimentResult, ExperimentError> {
    let mut rng = substream(seed, GENERATOR_STREAM);
    let mut collisions = 0;
    for _ in 0..trials {
        let a = generate_tag(setup.exclude, setup.allow_zero_tag, &mut rng).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        let b = generate_tag(setup.exclude, setup.allow_zero_tag, &mut rng).map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        collisions += u64::from(a == b);
    }
    let echo = json!({ "allow_zero_tag": setup.allow_zero_tag, "excluded": format!("{:?}", setup.exclude), "seed": seed });
    Ok(ExperimentResult::new("collision_rate", trials, collisions, echo))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmFrequency {
    pub sampling_rate: u64,
    pub allocations: u64,
    pub armed: u64,
    pub expected: f64,
    pub sigma: f64,
    pub within_3_sigma: bool,
}

/// Arms observed over `allocations` short-granule allocations made after
/// slow start ends, against the mean gap `(1 + 2R) / 2`.
pub fn exp_arm_frequency(sampling_rate: u64, allocations: u64, seed: u64) -> ArmFrequency {
    let sampler = SamplerConfig {
        alloc_threshold: 16,
        sampling_rate,
    };
    let mut alloc = Allocator::new(AllocatorConfig::default(), sampler, seed);
    let mut mem = TaggedMemory::new();
    for _ in 0..sampler.alloc_threshold {
        alloc.allocate(&mut mem, 24).expect("heap has room");
    }
    let before = alloc.stats().tripwires_armed;
    for _ in 0..allocations {
        alloc.allocate(&mut mem, 24).expect("heap has room");
    }
    let armed = alloc.stats().tripwires_armed - before;
    let p = 2.0 / (1.0 + 2.0 * sampling_rate as f64);
    let n = allocations as f64;
    let expected = n * p;
    let sigma = (n * p * (1.0 - p)).sqrt();
    ArmFrequency {
        sampling_rate,
        allocations,
        armed,
        expected,
        sigma,
        within_3_sigma: (armed as f64 - expected).abs() <= 3.0 * sigma,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransparencyDiff {
    pub program: usize,
    pub pc: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransparencyResult {
    pub name: String,
    pub programs: usize,
    pub passed: bool,
    pub failures: usize,
    pub first_diff: Option<TransparencyDiff>,
    pub warning: Option<String>,
    pub config_echo: Value,
}

/// Padding bytes of a live short granule that carries (or carried) a
/// tripwire hold handler metadata rather than program data.
fn in_tripwire_padding(alloc: &Allocator, addr: u64) -> bool {
    alloc.find_containing(addr).is_some_and(|r| {
        r.state == AllocState::Live && r.tripwire != TripwireState::None && addr >= r.base + r.requested_size
    })
}

fn compare_runs(index: usize, program: &Program, off: SimConfig, sync: SimConfig) -> Option<TransparencyDiff> {
    let diff = |pc, detail: String| Some(TransparencyDiff { program: index, pc, detail });
    let mut a = Simulator::new(program.clone(), off).record_effects();
    let mut b = Simulator::new(program.clone(), sync).record_effects();
    let ra = a.run_to_end();
    let rb = b.run_to_end();
    match (&ra, &rb) {
        (Ok(StepOutcome::Halted), Ok(StepOutcome::Halted)) => {}
        _ => return diff(None, format!("runs ended differently: off {ra:?}, sync {rb:?}")),
    }
    let (ea, eb) = (a.effects(), b.effects());
    if let Some(i) = (0..ea.len().max(eb.len())).find(|&i| ea.get(i) != eb.get(i)) {
        let pc = ea.get(i).or(eb.get(i)).map(|e| e.pc);
        return diff(pc, format!("memory access {i} differs: off {:?}, sync {:?}", ea.get(i), eb.get(i)));
    }
    if let Some(r) = (0..a.final_registers().len()).find(|&r| a.final_registers()[r] != b.final_registers()[r]) {
        return diff(None, format!("final r{r} differs"));
    }
    let written = a.written_addresses().union(b.written_addresses());
    for &addr in written.filter(|&&addr| !in_tripwire_padding(b.allocator(), addr)) {
        let (x, y) = (a.memory().read_u8(addr), b.memory().read_u8(addr));
        if x != y {
            return diff(None, format!("byte {addr:#x} differs: off {x:#04x}, sync {y:#04x}"));
        }
    }
    None
}

/// Runs every program with tag checks off and again in sync mode with every
/// short granule armed, and compares what the programs observe.
pub fn exp_recovery_transparency(programs: &[Program], config: &SimConfig, seed: u64) -> TransparencyResult {
    let off = |i: usize| SimConfig {
        mode: Mode::Off,
        mutation: None,
        seed: trial_seed(seed, i as u64),
        ..*config
    };
    let sync = |i: usize| SimConfig {
        mode: Mode::Sync,
        tripwires: true,
        alloc_threshold: u64::MAX,
        seed: trial_seed(seed, i as u64),
        ..*config
    };
    let diffs: Vec<TransparencyDiff> = programs
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| compare_runs(i, p, off(i), sync(i)))
        .collect();
    TransparencyResult {
        name: "recovery_transparency".into(),
        programs: programs.len(),
        passed: diffs.is_empty(),
        failures: diffs.len(),
        first_diff: diffs.into_iter().next(),
        warning: programs.is_empty().then(|| "empty corpus: nothing was compared".to_string()),
        config_echo: json!({ "sync": sync(0), "seed": seed }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_program;
    use crate::workload::{parse_size_distribution, WorkloadKind};
    use proptest::prelude::*;

    #[test]
    fn wilson_reference_values() {
        // 0 of 10 and 10 of 10 give the classic (0, 0.2775) bounds.
        let (lo, hi) = wilson_interval(0, 10, Z_95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.277_532).abs() < 1e-5, "{hi}");
        let (lo, hi) = wilson_interval(10, 10, Z_95);
        assert!((lo - 0.722_467).abs() < 1e-5 && hi == 1.0);
        let (lo, hi) = wilson_interval(50, 100, Z_95);
        assert!((lo - 0.403_831).abs() < 1e-5 && (hi - 0.596_168).abs() < 1e-5, "{lo} {hi}");
    }

    proptest! {
        #[test]
        fn wilson_contains_the_estimate(trials in 1u64..100_000, frac in 0.0f64..=1.0) {
            let k = (trials as f64 * frac) as u64;
            let r = ExperimentResult::new("t", trials, k, Value::Null);
            prop_assert!(r.wilson_95_ci.0 <= r.rate && r.rate <= r.wilson_95_ci.1);
            prop_assert!(r.wilson_95_ci.0 >= 0.0 && r.wilson_95_ci.1 <= 1.0);
        }
    }

    #[test]
    fn detection_rate_is_reproducible() {
        let spec = WorkloadSpec::new(WorkloadKind::UseAfterFree, parse_size_distribution("24:1,48:1").unwrap(), 1, 0);
        let spec = WorkloadSpec { reuse_cycles: 1, ..spec };
        let a = exp_detection_rate(&spec, &SimConfig::default(), 200, 5).unwrap();
        let b = exp_detection_rate(&spec, &SimConfig::default(), 200, 5).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.detected < 200 && a.detected > 150, "{}", a.detected);
    }

    #[test]
    fn collision_edge_cases() {
        let forced: TagSet = (1..=14).collect();
        let r = exp_collision_rate(CollisionSetup { allow_zero_tag: false, exclude: forced }, 1000, 1).unwrap();
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn transparency_handles_empty_and_mutated_corpora() {
        let r = exp_recovery_transparency(&[], &SimConfig::default(), 0);
        assert!(r.passed && r.warning.is_some());

        let p = parse_program("alloc r0 40\nmov r1 5\nst r1 [r0, #32] w8 p1\nst r1 [r0, #0] w8 p1\nhalt").unwrap();
        assert!(exp_recovery_transparency(std::slice::from_ref(&p), &SimConfig::default(), 0).passed);
        let broken = SimConfig {
            mutation: Some(crate::detector::Mutation::SkipRevocation),
            ..SimConfig::default()
        };
        let r = exp_recovery_transparency(&[p], &broken, 0);
        assert!(!r.passed);
        assert_eq!(r.first_diff.unwrap().pc, Some(3));
    }
}
