//! Synthetic workload generator: single-bug micro programs of each class and
//! benign stress programs.
//!
//! Bug programs rely on the primary allocator handing out fresh regions
//! contiguously, so the generator computes overflow offsets from size classes
//! alone and never frees in the preamble.

use std::fmt;
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::allocator::{size_class, DEFAULT_LARGE_THRESHOLD};
use crate::isa::{Instruction, MemAccess, Offset, Program, Reg, Width};
use crate::memory::GRANULE_SIZE;
use crate::rng::{substream, trial_seed, SimRng, GENERATOR_STREAM};

pub const DEFAULT_PREAMBLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum WorkloadKind {
    #[serde(rename = "intra")]
    IntraGranuleOverflow,
    #[serde(rename = "cross")]
    CrossGranuleOverflow,
    #[serde(rename = "uaf")]
    UseAfterFree,
    #[serde(rename = "double-free")]
    DoubleFree,
    #[serde(rename = "benign")]
    Benign,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::IntraGranuleOverflow,
        WorkloadKind::CrossGranuleOverflow,
        WorkloadKind::UseAfterFree,
        WorkloadKind::DoubleFree,
        WorkloadKind::Benign,
    ];

    /// Short name used on the command line and as the corpus directory.
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::IntraGranuleOverflow => "intra",
            WorkloadKind::CrossGranuleOverflow => "cross",
            WorkloadKind::UseAfterFree => "uaf",
            WorkloadKind::DoubleFree => "double-free",
            WorkloadKind::Benign => "benign",
        }
    }

    pub fn is_bug(self) -> bool {
        self != WorkloadKind::Benign
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let kind = match s {
            "intra" | "IntraGranuleOverflow" => WorkloadKind::IntraGranuleOverflow,
            "cross" | "CrossGranuleOverflow" => WorkloadKind::CrossGranuleOverflow,
            "uaf" | "UseAfterFree" => WorkloadKind::UseAfterFree,
            "double-free" | "DoubleFree" => WorkloadKind::DoubleFree,
            "benign" | "Benign" => WorkloadKind::Benign,
            _ => return Err(format!("unknown workload kind `{s}` (expected intra, cross, uaf, double-free or benign)")),
        };
        Ok(kind)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SizeWeight {
    pub size: u64,
    pub weight: u32,
}

/// Parses `24:1,40:2`. A bare size gets weight 1.
pub fn parse_size_distribution(text: &str) -> Result<Vec<SizeWeight>, String> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (size, weight) = match item.split_once(':') {
            Some((s, w)) => (s, w),
            None => (item, "1"),
        };
        let size: u64 = size.trim().parse().map_err(|_| format!("invalid size `{size}`"))?;
        let weight: u32 = weight.trim().parse().map_err(|_| format!("invalid weight `{weight}`"))?;
        out.push(SizeWeight { size, weight });
    }
    if out.is_empty() {
        return Err("empty size distribution".into());
    }
    Ok(out)
}

/// Uniform weights over `lo..=hi`.
pub fn uniform_sizes(lo: u64, hi: u64) -> Vec<SizeWeight> {
    (lo..=hi).map(|size| SizeWeight { size, weight: 1 }).collect()
}

pub fn default_size_distribution() -> Vec<SizeWeight> {
    [8, 13, 24, 40, 57, 64, 100, 250]
        .into_iter()
        .map(|size| SizeWeight { size, weight: 1 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub size_distribution: Vec<SizeWeight>,
    pub count: usize,
    pub seed: u64,
    /// In-bounds allocations made before the bug (or benign body).
    pub preamble: usize,
    /// Cross overflows: allocations between attacker and victim. Zero makes
    /// the overflow straddle the attacker's last granule into the victim.
    pub gap_allocations: usize,
    /// Use-after-free: allocate/free cycles on the freed slot before the
    /// stale access.
    pub reuse_cycles: usize,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, size_distribution: Vec<SizeWeight>, count: usize, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            size_distribution,
            count,
            seed,
            preamble: DEFAULT_PREAMBLE,
            gap_allocations: 0,
            reuse_cycles: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("size distribution is empty or has a zero weight")]
    BadWeights,
    #[error("allocation size must be at least 1")]
    ZeroSize,
    #[error("intra-granule overflows need a size that is not a multiple of 16")]
    NoShortGranule,
    #[error("cross-granule overflows need sizes of at most {0} bytes")]
    SizeTooLarge(u64),
}

struct Sizes {
    sizes: Vec<u64>,
    index: WeightedIndex<u32>,
}

impl Sizes {
    fn new(dist: &[SizeWeight]) -> Result<Self, WorkloadError> {
        if dist.is_empty() || dist.iter().any(|s| s.weight == 0) {
            return Err(WorkloadError::BadWeights);
        }
        if dist.iter().any(|s| s.size == 0) {
            return Err(WorkloadError::ZeroSize);
        }
        Ok(Sizes {
            sizes: dist.iter().map(|s| s.size).collect(),
            index: WeightedIndex::new(dist.iter().map(|s| s.weight)).map_err(|_| WorkloadError::BadWeights)?,
        })
    }

    fn draw(&self, rng: &mut SimRng) -> u64 {
        self.sizes[self.index.sample(rng)]
    }
}

fn r(n: u8) -> Reg {
    Reg::new(n).expect("generator registers are in range")
}

fn access(reg: u8, base: u8, offset: Offset, width: Width, pair: u8) -> MemAccess {
    MemAccess {
        reg: r(reg),
        base: r(base),
        offset,
        width,
        pair,
        atomic: false,
        overread_ok: false,
    }
}

/// Offset of the intra-granule overflow access for an allocation of `size`
/// bytes with a `width`-byte access: inside the final granule, ending past
/// `size`.
pub fn intra_overflow_offset(size: u64, width: u64) -> u64 {
    let gb = size & !(GRANULE_SIZE - 1);
    gb.max(size.saturating_sub(width / 2)).min(gb + GRANULE_SIZE - width)
}

/// Largest power-of-two width no larger than `limit` (at most 16).
fn width_at_most(limit: u64) -> Width {
    Width::ALL.into_iter().rev().find(|w| w.bytes() <= limit).unwrap_or(Width::B1)
}

const PREAMBLE_BASE_REG: u8 = 10;
const PREAMBLE_REGS: u8 = 10;
const DATA_REG: u8 = 8;

struct Builder {
    body: Vec<Instruction>,
}

impl Builder {
    fn new() -> Self {
        Builder { body: Vec::new() }
    }

    fn push(&mut self, ins: Instruction) {
        self.body.push(ins);
    }

    fn alloc(&mut self, dst: u8, size: u64) {
        self.push(Instruction::Alloc { dst: r(dst), size });
    }

    /// Allocations the bug never touches, each with one in-bounds store.
    fn preamble(&mut self, n: usize, sizes: &Sizes, rng: &mut SimRng) {
        for i in 0..n {
            let reg = PREAMBLE_BASE_REG + (i as u8 % PREAMBLE_REGS);
            let size = sizes.draw(rng);
            self.alloc(reg, size);
            self.push(Instruction::Mov { dst: r(DATA_REG), imm: rng.gen() });
            let w = width_at_most(size.min(8));
            self.push(Instruction::Store(access(DATA_REG, reg, Offset::Imm(0), w, 1)));
        }
    }

    fn finish(mut self) -> Program {
        self.push(Instruction::Halt);
        Program::new(self.body).expect("generated programs are well formed")
    }
}

fn random_width(rng: &mut SimRng) -> Width {
    Width::ALL[rng.gen_range(0..Width::ALL.len())]
}

fn gen_intra(spec: &WorkloadSpec, sizes: &Sizes, rng: &mut SimRng) -> Result<Program, WorkloadError> {
    let short: Vec<SizeWeight> = spec
        .size_distribution
        .iter()
        .copied()
        .filter(|s| s.size % GRANULE_SIZE != 0)
        .collect();
    let short_sizes = Sizes::new(&short).map_err(|_| WorkloadError::NoShortGranule)?;
    let mut b = Builder::new();
    b.preamble(spec.preamble, sizes, rng);
    let size = short_sizes.draw(rng);
    let width = random_width(rng);
    let offset = intra_overflow_offset(size, width.bytes());
    b.alloc(0, size);
    let m = access(DATA_REG, 0, Offset::Imm(offset as i64), width, 1);
    if rng.gen_bool(0.5) {
        b.push(Instruction::Mov { dst: r(DATA_REG), imm: rng.gen() });
        b.push(Instruction::Store(m));
    } else {
        b.push(Instruction::Load(m));
    }
    Ok(b.finish())
}

fn gen_cross(spec: &WorkloadSpec, sizes: &Sizes, rng: &mut SimRng) -> Result<Program, WorkloadError> {
    if spec.size_distribution.iter().any(|s| s.size > DEFAULT_LARGE_THRESHOLD) {
        return Err(WorkloadError::SizeTooLarge(DEFAULT_LARGE_THRESHOLD));
    }
    let mut b = Builder::new();
    b.preamble(spec.preamble, sizes, rng);
    let attacker = sizes.draw(rng);
    b.alloc(0, attacker);
    let mut distance = size_class(attacker);
    for i in 0..spec.gap_allocations {
        let gap = sizes.draw(rng);
        b.alloc(1 + (i % 6) as u8, gap);
        distance += size_class(gap);
    }
    let victim = size_class(sizes.draw(rng));
    b.alloc(7, victim);
    let (offset, width) = if spec.gap_allocations == 0 {
        // Straddle the boundary: last 8 bytes of the attacker, first 8 of the victim.
        (distance - 8, Width::B16)
    } else {
        (distance + rng.gen_range(0..=8), Width::B8)
    };
    b.push(Instruction::Mov { dst: r(DATA_REG), imm: rng.gen() });
    b.push(Instruction::Store(access(DATA_REG, 0, Offset::Imm(offset as i64), width, 1)));
    Ok(b.finish())
}

fn gen_uaf(spec: &WorkloadSpec, sizes: &Sizes, rng: &mut SimRng) -> Program {
    let mut b = Builder::new();
    b.preamble(spec.preamble, sizes, rng);
    let size = sizes.draw(rng);
    b.alloc(0, size);
    b.push(Instruction::Free { src: r(0) });
    for _ in 0..spec.reuse_cycles {
        b.alloc(1, size);
        b.push(Instruction::Free { src: r(1) });
    }
    let w = width_at_most(size.min(8));
    b.push(Instruction::Load(access(DATA_REG, 0, Offset::Imm(0), w, 1)));
    b.finish()
}

fn gen_double_free(spec: &WorkloadSpec, sizes: &Sizes, rng: &mut SimRng) -> Program {
    let mut b = Builder::new();
    b.preamble(spec.preamble, sizes, rng);
    b.alloc(0, sizes.draw(rng));
    b.push(Instruction::Free { src: r(0) });
    b.push(Instruction::Free { src: r(0) });
    b.finish()
}

/// Live pointers sit in r0..r7; loads land in r8..r27; r28 holds register
/// offsets and r29 derived base pointers.
const PTR_SLOTS: u8 = 8;
const DATA_LO: u8 = 8;
const DATA_HI: u8 = 27;
const OFFSET_REG: u8 = 28;
const DERIVED_REG: u8 = 29;

fn benign_access(b: &mut Builder, slot: u8, size: u64, rng: &mut SimRng) {
    let widths: Vec<Width> = Width::ALL.into_iter().filter(|w| w.bytes() <= size).collect();
    let width = widths[rng.gen_range(0..widths.len())];
    let pair = if 2 * width.bytes() <= size && rng.gen_bool(0.3) { 2 } else { 1 };
    let total = width.bytes() * u64::from(pair);
    // Favor accesses ending on the last addressable byte, where the
    // tripwire lives.
    let offset = if rng.gen_bool(0.4) {
        size - total
    } else {
        rng.gen_range(0..=size - total)
    };
    let data = rng.gen_range(DATA_LO..DATA_HI);
    let is_store = rng.gen_bool(0.5);
    if is_store {
        for i in 0..pair {
            b.push(Instruction::Mov { dst: r(data + i), imm: rng.gen() });
        }
    }
    let (base, off) = match rng.gen_range(0..4) {
        0 => {
            b.push(Instruction::Mov { dst: r(OFFSET_REG), imm: offset as i64 });
            (slot, Offset::Reg(r(OFFSET_REG)))
        }
        1 => {
            let shift = rng.gen_range(-32i64..=32);
            b.push(Instruction::Add { dst: r(DERIVED_REG), src: r(slot), imm: shift });
            (DERIVED_REG, Offset::Imm(offset as i64 - shift))
        }
        _ => (slot, Offset::Imm(offset as i64)),
    };
    let m = access(data, base, off, width, pair);
    b.push(if is_store { Instruction::Store(m) } else { Instruction::Load(m) });
}

fn gen_benign(spec: &WorkloadSpec, sizes: &Sizes, rng: &mut SimRng) -> Program {
    let mut b = Builder::new();
    let slots = spec.preamble.clamp(1, usize::from(PTR_SLOTS)) as u8;
    let mut live: Vec<u64> = Vec::new();
    for slot in 0..slots {
        let size = sizes.draw(rng);
        b.alloc(slot, size);
        live.push(size);
    }
    let ops = rng.gen_range(8..=24);
    for _ in 0..ops {
        let slot = rng.gen_range(0..slots);
        match rng.gen_range(0..20) {
            0..=10 => benign_access(&mut b, slot, live[usize::from(slot)], rng),
            11 | 12 => {
                b.push(Instruction::Free { src: r(slot) });
                let size = sizes.draw(rng);
                b.alloc(slot, size);
                live[usize::from(slot)] = size;
            }
            13 => b.push(Instruction::Syscall),
            14 | 15 => b.push(Instruction::Ret),
            16 | 17 => b.push(Instruction::Mov {
                dst: r(rng.gen_range(DATA_LO..DATA_HI)),
                imm: rng.gen(),
            }),
            _ => {
                let src = rng.gen_range(DATA_LO..=DATA_HI);
                b.push(Instruction::Add {
                    dst: r(rng.gen_range(DATA_LO..=DATA_HI)),
                    src: r(src),
                    imm: rng.gen_range(-1000..1000),
                });
            }
        }
    }
    b.finish()
}

/// Generates program `index` of the workload. Each program has its own
/// random stream, so any program can be regenerated in isolation.
pub fn generate_one(spec: &WorkloadSpec, index: u64) -> Result<Program, WorkloadError> {
    let sizes = Sizes::new(&spec.size_distribution)?;
    let mut rng = substream(trial_seed(spec.seed, index), GENERATOR_STREAM);
    Ok(match spec.kind {
        WorkloadKind::IntraGranuleOverflow => gen_intra(spec, &sizes, &mut rng)?,
        WorkloadKind::CrossGranuleOverflow => gen_cross(spec, &sizes, &mut rng)?,
        WorkloadKind::UseAfterFree => gen_uaf(spec, &sizes, &mut rng),
        WorkloadKind::DoubleFree => gen_double_free(spec, &sizes, &mut rng),
        WorkloadKind::Benign => gen_benign(spec, &sizes, &mut rng),
    })
}

/// Checks a `WorkloadSpec` without generating anything.
pub fn validate_spec(spec: &WorkloadSpec) -> Result<(), WorkloadError> {
    if spec.count == 0 {
        return Err(WorkloadError::ZeroCount);
    }
    Sizes::new(&spec.size_distribution)?;
    match spec.kind {
        WorkloadKind::IntraGranuleOverflow if spec.size_distribution.iter().all(|s| s.size % GRANULE_SIZE == 0) => {
            Err(WorkloadError::NoShortGranule)
        }
        WorkloadKind::CrossGranuleOverflow if spec.size_distribution.iter().any(|s| s.size > DEFAULT_LARGE_THRESHOLD) => {
            Err(WorkloadError::SizeTooLarge(DEFAULT_LARGE_THRESHOLD))
        }
        _ => Ok(()),
    }
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<Program>, WorkloadError> {
    validate_spec(spec)?;
    (0..spec.count as u64).map(|i| generate_one(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::check_bounds;

    fn spec(kind: WorkloadKind, sizes: &str) -> WorkloadSpec {
        WorkloadSpec::new(kind, parse_size_distribution(sizes).unwrap(), 50, 7)
    }

    #[test]
    fn intra_offset_for_forty_bytes() {
        assert_eq!(intra_overflow_offset(40, 8), 36);
        for size in (1..200).filter(|s| s % 16 != 0) {
            for w in [1, 2, 4, 8, 16] {
                let off = intra_overflow_offset(size, w);
                let gb = size & !15;
                assert!(off >= gb && off + w <= gb + 16 && off + w > size, "{size} {w}");
            }
        }
    }

    #[test]
    fn intra_rejects_granule_multiples() {
        let s = spec(WorkloadKind::IntraGranuleOverflow, "32:1,64:2");
        assert_eq!(generate_workload(&s), Err(WorkloadError::NoShortGranule));
    }

    #[test]
    fn distribution_parsing() {
        assert_eq!(
            parse_size_distribution("24:1, 40:3,7").unwrap(),
            vec![
                SizeWeight { size: 24, weight: 1 },
                SizeWeight { size: 40, weight: 3 },
                SizeWeight { size: 7, weight: 1 }
            ]
        );
        assert!(parse_size_distribution("").is_err());
        assert!(parse_size_distribution("x:1").is_err());
        let s = spec(WorkloadKind::Benign, "24:0");
        assert_eq!(generate_workload(&s), Err(WorkloadError::BadWeights));
    }

    #[test]
    fn deterministic_under_seed() {
        for kind in WorkloadKind::ALL {
            let s = spec(kind, "24:1,40:1,13:1");
            let a: Vec<String> = generate_workload(&s).unwrap().iter().map(Program::render).collect();
            let b: Vec<String> = generate_workload(&s).unwrap().iter().map(Program::render).collect();
            assert_eq!(a, b);
            let other = WorkloadSpec { seed: 8, ..s };
            let c: Vec<String> = generate_workload(&other).unwrap().iter().map(Program::render).collect();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn bug_programs_are_flagged_by_the_bounds_oracle() {
        for kind in WorkloadKind::ALL.into_iter().filter(|k| k.is_bug()) {
            let mut s = spec(kind, "24:1,40:1,13:1,100:1");
            s.count = 200;
            s.reuse_cycles = 1;
            s.gap_allocations = usize::from(kind == WorkloadKind::CrossGranuleOverflow);
            for p in generate_workload(&s).unwrap() {
                let v = check_bounds(&p);
                assert_eq!(v.len(), 1, "{kind}: {}", p.render());
                assert_eq!(v[0].pc, p.len() - 2, "{kind}: {}", p.render());
            }
        }
    }

    #[test]
    fn benign_programs_pass_the_bounds_oracle() {
        let mut s = spec(WorkloadKind::Benign, "1:1,7:1,24:1,40:1,64:1,100:1");
        s.count = 300;
        for p in generate_workload(&s).unwrap() {
            assert_eq!(check_bounds(&p), vec![], "{}", p.render());
        }
    }

    #[test]
    fn benign_sizes_come_from_the_distribution() {
        let s = spec(WorkloadKind::Benign, "24:1,40:1");
        for p in generate_workload(&s).unwrap() {
            for ins in p.instructions() {
                if let Instruction::Alloc { size, .. } = ins {
                    assert!(*size == 24 || *size == 40);
                }
            }
        }
    }
}
