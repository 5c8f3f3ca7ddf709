//! Tag mismatch handler.
//!
//! A fault on a tripwire is resolved with in-band information only: the
//! granule's memory tag (the tripwire tag, equal to the addressable byte
//! count) and the low nibble of the granule's last byte (the real tag). A
//! benign access is let through by temporarily swapping the two nibbles,
//! planting a trap on the following instruction and swapping them back when
//! the trap fires.

use std::collections::HashMap;

use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;
use thiserror::Error;

use crate::allocator::{AllocState, Allocator, FreeMismatch, ShortGranuleMetadata, TripwireState, METADATA_BYTE};
use crate::cpu::{Fault, MachineState};
use crate::isa::{Program, NUM_REGS};
use crate::memory::{granule_base, TaggedMemory};

pub const DEFAULT_ACCESS_THRESHOLD: u16 = 64;

/// Byte-granular check for an access that faulted on granule `f & !15`.
///
/// Returns `true` when the access is benign: both tags are nonzero, the
/// granule's stored real tag matches the pointer, and the access ends no
/// later than the last addressable byte of the short granule. Reads nothing
/// but its arguments.
pub fn check_access(f: u64, start: u64, size: u64, addrtag: u8, memtag: u8, metadata: u8) -> bool {
    if memtag == 0 || addrtag == 0 {
        return false;
    }
    if addrtag != metadata {
        return false;
    }
    let short_granule = f & !(16 - 1);
    let permitted = short_granule + u64::from(memtag);
    let attempted = start.wrapping_add(size);
    attempted <= permitted
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BugKind {
    IntraGranuleOverflow,
    CrossGranuleOverflow,
    UseAfterFreeOrWild,
    ZeroTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Benign,
    Bug(BugKind),
}

/// A detected memory-safety bug. Field order is the JSON field order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BugReport {
    pub kind: BugKind,
    pub pc: usize,
    pub fault_address: u64,
    pub addrtag: u8,
    pub memtag: u8,
    pub addressable_bytes: Option<u8>,
    pub accessed_bytes_in_granule: Option<u64>,
    pub regs: [u64; NUM_REGS],
}

impl BugReport {
    /// x0..x30, sp and pc.
    pub fn register_dump(&self) -> [u64; NUM_REGS + 1] {
        let mut out = [0u64; NUM_REGS + 1];
        out[..NUM_REGS].copy_from_slice(&self.regs);
        out[NUM_REGS] = self.pc as u64;
        out
    }
}

impl Serialize for BugReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let n = 6 + usize::from(self.addressable_bytes.is_some()) + usize::from(self.accessed_bytes_in_granule.is_some());
        let mut s = serializer.serialize_struct("BugReport", n)?;
        s.serialize_field("kind", &self.kind)?;
        s.serialize_field("pc", &self.pc)?;
        s.serialize_field("fault_address", &format!("{:#018x}", self.fault_address))?;
        s.serialize_field("addrtag", &self.addrtag)?;
        s.serialize_field("memtag", &self.memtag)?;
        if let Some(a) = self.addressable_bytes {
            s.serialize_field("addressable_bytes", &a)?;
        }
        if let Some(a) = self.accessed_bytes_in_granule {
            s.serialize_field("accessed_bytes_in_granule", &a)?;
        }
        let regs: Vec<String> = self.register_dump().iter().map(|r| format!("{r:#018x}")).collect();
        s.serialize_field("regs", &regs)?;
        s.end()
    }
}

/// Everything needed to label and report a faulting access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultContext {
    pub memtag: u8,
    pub metadata: u8,
}

impl FaultContext {
    pub fn read(mem: &TaggedMemory, fault_address: u64) -> Self {
        FaultContext {
            memtag: mem.get_granule_tag(fault_address),
            metadata: mem.read_u8(granule_base(fault_address) + METADATA_BYTE) & 0xF,
        }
    }
}

/// Labels a rejected access. The registry is consulted only to tell a stray
/// pointer into a live neighbor from a stale pointer.
pub fn classify(fault: &Fault, ctx: FaultContext, alloc: &Allocator) -> BugKind {
    let addrtag = fault.access.addrtag;
    if addrtag == 0 || ctx.memtag == 0 {
        return BugKind::ZeroTag;
    }
    if ctx.metadata == addrtag {
        return BugKind::IntraGranuleOverflow;
    }
    let target_freed = alloc
        .find_containing(fault.fault_address)
        .is_some_and(|r| r.state == AllocState::Freed);
    if !target_freed && alloc.is_live_tag(addrtag) {
        BugKind::CrossGranuleOverflow
    } else {
        BugKind::UseAfterFreeOrWild
    }
}

/// Builds the report for a rejected access.
pub fn make_bug_report(fault: &Fault, ctx: FaultContext, kind: BugKind) -> BugReport {
    let intra = kind == BugKind::IntraGranuleOverflow;
    let granule = granule_base(fault.fault_address);
    BugReport {
        kind,
        pc: fault.pc,
        fault_address: fault.fault_address,
        addrtag: fault.access.addrtag,
        memtag: ctx.memtag,
        addressable_bytes: intra.then_some(ctx.memtag),
        accessed_bytes_in_granule: intra.then(|| fault.access.end().saturating_sub(granule)),
        regs: fault.regs,
    }
}

/// Report for a free whose pointer does not name a live allocation.
pub fn make_free_report(pc: usize, mismatch: &FreeMismatch, regs: &[u64; NUM_REGS]) -> BugReport {
    let addrtag = mismatch.ptr.tag();
    let kind = if addrtag == 0 || mismatch.memtag == 0 {
        BugKind::ZeroTag
    } else {
        BugKind::UseAfterFreeOrWild
    };
    BugReport {
        kind,
        pc,
        fault_address: mismatch.ptr.address(),
        addrtag,
        memtag: mismatch.memtag,
        addressable_bytes: None,
        accessed_bytes_in_granule: None,
        regs: *regs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CounterState {
    Below,
    ReachedCapacity,
    ReachedThreshold,
}

/// Increments the in-band access counter of an armed short granule with
/// `addressable` bytes and reports whether a removal limit was hit.
pub fn bump_access_count(mem: &mut TaggedMemory, granule: u64, addressable: u8, access_threshold: u16) -> CounterState {
    let mut meta = ShortGranuleMetadata::read(mem, granule, addressable);
    meta.access_count = (meta.access_count + 1).min(meta.capacity);
    meta.write(mem, granule);
    if meta.access_count >= access_threshold {
        CounterState::ReachedThreshold
    } else if meta.access_count >= meta.capacity {
        CounterState::ReachedCapacity
    } else {
        CounterState::Below
    }
}

/// Fault-injection knobs for checking the harness catches a broken handler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mutation {
    /// Traps are consumed without restoring the tripwire or the trapped
    /// instruction, so the instruction under the trap never executes.
    SkipRevocation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DetectorConfig {
    pub access_threshold: u16,
    pub tripwires_enabled: bool,
    pub overread_skip: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mutation: Option<Mutation>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            access_threshold: DEFAULT_ACCESS_THRESHOLD,
            tripwires_enabled: true,
            overread_skip: false,
            mutation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Report(Box<BugReport>),
    Resume,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrapAction {
    /// Execute the trapped instruction.
    Execute,
    /// The slot still holds the trap; skip it.
    Skip,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DetectorError {
    #[error("trap at instruction {pc} has no delegated tripwire")]
    OrphanTrap { pc: usize },
    #[error("instruction {pc} already holds a trap for granule {granule:#x}")]
    TrapInUse { pc: usize, granule: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DetectorStats {
    pub benign_hits: u64,
    pub removed_by_threshold: u64,
    pub removed_by_ret_edge: u64,
}

#[derive(Debug)]
pub struct Detector {
    config: DetectorConfig,
    /// Trap pc -> delegated short granule.
    delegations: HashMap<usize, u64>,
    stats: DetectorStats,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Self {
        assert!(config.access_threshold >= 1, "access threshold must be at least 1");
        Detector {
            config,
            delegations: HashMap::new(),
            stats: DetectorStats::default(),
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn stats(&self) -> DetectorStats {
        self.stats
    }

    pub fn delegated_count(&self) -> usize {
        self.delegations.len()
    }

    /// Decides whether the faulting access is benign without touching any
    /// state.
    pub fn verdict(&self, fault: &Fault, ctx: FaultContext, alloc: &Allocator) -> Verdict {
        let a = &fault.access;
        let benign = if !self.config.tripwires_enabled {
            false
        } else if self.config.overread_skip && a.overread_ok {
            a.addrtag != 0 && ctx.memtag != 0 && a.addrtag == ctx.metadata
        } else {
            check_access(fault.fault_address, a.start, a.size, a.addrtag, ctx.memtag, ctx.metadata)
        };
        if benign {
            Verdict::Benign
        } else {
            Verdict::Bug(classify(fault, ctx, alloc))
        }
    }

    /// Handles a precise fault. On a bug, returns the report and leaves all
    /// state untouched; on a benign tripwire hit, delegates the granule and
    /// arranges for revocation.
    pub fn handle_tag_mismatch(
        &mut self,
        fault: &Fault,
        mem: &mut TaggedMemory,
        alloc: &mut Allocator,
        machine: &mut MachineState,
        program: &Program,
    ) -> Result<Action, DetectorError> {
        let ctx = FaultContext::read(mem, fault.fault_address);
        let granule = granule_base(fault.fault_address);
        match self.verdict(fault, ctx, alloc) {
            Verdict::Bug(kind) => return Ok(Action::Report(Box::new(make_bug_report(fault, ctx, kind)))),
            Verdict::Benign => {}
        }
        let Some(owner) = alloc
            .find_by_short_granule(granule)
            .filter(|r| r.tripwire == TripwireState::Armed)
            .map(|r| r.base)
        else {
            // In-band state looks like a tripwire but nothing armed one.
            return Ok(Action::Report(Box::new(make_bug_report(fault, ctx, BugKind::UseAfterFreeOrWild))));
        };
        self.stats.benign_hits += 1;

        let tripwire_tag = ctx.memtag;
        let real_tag = ctx.metadata;
        match bump_access_count(mem, granule, tripwire_tag, self.config.access_threshold) {
            CounterState::ReachedCapacity | CounterState::ReachedThreshold => {
                mem.set_granule_tag(granule, real_tag);
                ShortGranuleMetadata::clear(mem, granule, tripwire_tag);
                alloc.set_tripwire_state(owner, TripwireState::Removed);
                self.stats.removed_by_threshold += 1;
                return Ok(Action::Resume);
            }
            CounterState::Below => {}
        }

        // Delegation.
        swap_tags(mem, granule);
        alloc.set_tripwire_state(owner, TripwireState::Delegated);

        // Escalation.
        let next = fault.pc + 1;
        if let Some(&g) = self.delegations.get(&next) {
            return Err(DetectorError::TrapInUse { pc: next, granule: g });
        }
        match machine.set_trap(program, next) {
            Ok(()) => {
                self.delegations.insert(next, granule);
            }
            Err(_) => {
                // No slot to revoke from: the tripwire stays down for good.
                set_metadata_nibble(mem, granule, real_tag);
                alloc.set_tripwire_state(owner, TripwireState::Removed);
                self.stats.removed_by_ret_edge += 1;
            }
        }
        Ok(Action::Resume)
    }

    /// Revocation: restores the tripwire delegated for the trap at `pc`.
    pub fn handle_trap(
        &mut self,
        pc: usize,
        mem: &mut TaggedMemory,
        alloc: &mut Allocator,
        machine: &mut MachineState,
    ) -> Result<TrapAction, DetectorError> {
        let granule = self.delegations.remove(&pc).ok_or(DetectorError::OrphanTrap { pc })?;
        machine.clear_trap(pc);
        if self.config.mutation == Some(Mutation::SkipRevocation) {
            return Ok(TrapAction::Skip);
        }
        swap_tags(mem, granule);
        if let Some(base) = alloc.find_by_short_granule(granule).map(|r| r.base) {
            alloc.set_tripwire_state(base, TripwireState::Armed);
        }
        Ok(TrapAction::Execute)
    }
}

fn set_metadata_nibble(mem: &mut TaggedMemory, granule: u64, nibble: u8) {
    let addr = granule + METADATA_BYTE;
    let b = mem.read_u8(addr);
    mem.write_u8(addr, (b & 0xF0) | (nibble & 0xF));
}

/// Exchanges the granule's memory tag with the metadata nibble.
pub fn swap_tags(mem: &mut TaggedMemory, granule: u64) {
    let memtag = mem.get_granule_tag(granule);
    let nibble = mem.read_u8(granule + METADATA_BYTE) & 0xF;
    mem.set_granule_tag(granule, nibble);
    set_metadata_nibble(mem, granule, memtag);
}
